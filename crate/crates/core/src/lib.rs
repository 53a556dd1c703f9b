//! Dual-path transformer blocks: a looped deep sublayer and a wide sublayer
//! under per-token sigmoid gates, with the iso-FLOP width solver, routing
//! read-outs, inference-time ablations and a byte-level training pipeline.
//!
//! Everything runs on a small tape-based reverse-mode autodiff engine over
//! dense row-major tensors, in `f32` for training and `f64` for gradient
//! checks.

pub mod ablation;
pub mod autodiff;
pub mod backbone;
pub mod block;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod routing;
pub mod tensor;
pub mod train;

pub use ablation::{evaluate_ce, run_ablations, AblationReport, AblationSpec};
pub use autodiff::{Tape, Var};
pub use block::{loop_mix_weights, ForwardOptions, GateMode, GateOverride, TokenRoute};
pub use config::{BackboneConfig, BlockVariant, ModelConfig, RunConfig};
pub use corpus::{synthetic_corpus, Corpus};
pub use error::{Error, Result};
pub use flops::{param_count, solve_widths, BudgetQuery, BudgetSolution, ParamCount, VariantKind};
pub use gradcheck::{grad_check, GradCheckReport};
pub use model::{Batch, Model};
pub use params::ParameterStore;
pub use routing::{deep_share, path_cosine, RoutingRecord};
pub use tensor::{softplus, Scalar, Tensor};
pub use train::{bits_per_byte, lr_at, AdamW, EvalReport, TrainConfig};
