//! Architecture configuration and the plain-text run config file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{solve_widths, BudgetQuery, VariantKind};
use crate::train::TrainConfig;

/// Variant-independent decoder shape.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads_q: usize,
    pub heads_kv: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub tie_embeddings: bool,
}

impl BackboneConfig {
    /// Desk-scale byte-level backbone.
    pub fn desk() -> Self {
        BackboneConfig {
            layers: 4,
            d_model: 64,
            heads_q: 4,
            heads_kv: 4,
            vocab: 256,
            max_seq_len: 128,
            rope_base: 10_000.0,
            tie_embeddings: false,
        }
    }

    /// The 16-layer, 768-wide reference backbone.
    pub fn reference() -> Self {
        BackboneConfig {
            layers: 16,
            d_model: 768,
            heads_q: 12,
            heads_kv: 12,
            vocab: 50_304,
            max_seq_len: 4096,
            rope_base: 10_000.0,
            tie_embeddings: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads_q
    }

    pub fn n_rep(&self) -> usize {
        self.heads_q / self.heads_kv
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.d_model == 0 || self.vocab == 0 || self.max_seq_len == 0 {
            return bad("layer count, width, vocabulary and max length must be positive".into());
        }
        if self.heads_q == 0 || self.heads_kv == 0 {
            return bad("head counts must be positive".into());
        }
        if self.d_model % self.heads_q != 0 {
            return bad(format!("d={} is not divisible by h_q={}", self.d_model, self.heads_q));
        }
        if self.heads_q % self.heads_kv != 0 {
            return bad(format!("h_q={} is not divisible by h_kv={}", self.heads_q, self.heads_kv));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dimension {} must be even for rotary encoding", self.head_dim()));
        }
        if !(self.rope_base > 0.0) {
            return bad("rope_base must be positive".into());
        }
        Ok(())
    }
}

/// Which sublayers a block runs. Widths are the configured FFN widths; the
/// SwiGLU hidden size is derived from them with [`crate::flops::h_eff`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BlockVariant {
    DualPath {
        loops: usize,
        d_ffn_deep: usize,
        d_ffn_wide: usize,
    },
    PureLoop {
        loops: usize,
        d_ffn: usize,
    },
    PureWide {
        d_ffn_wide: usize,
    },
}

impl BlockVariant {
    pub fn kind(&self) -> VariantKind {
        match self {
            BlockVariant::DualPath { .. } => VariantKind::Dual,
            BlockVariant::PureLoop { .. } => VariantKind::PureLoop,
            BlockVariant::PureWide { .. } => VariantKind::PureWide,
        }
    }

    /// Trained recursion depth (1 for PureWide).
    pub fn loops(&self) -> usize {
        match self {
            BlockVariant::DualPath { loops, .. } | BlockVariant::PureLoop { loops, .. } => *loops,
            BlockVariant::PureWide { .. } => 1,
        }
    }

    pub fn deep_width(&self) -> Option<usize> {
        match self {
            BlockVariant::DualPath { d_ffn_deep, .. } => Some(*d_ffn_deep),
            BlockVariant::PureLoop { d_ffn, .. } => Some(*d_ffn),
            BlockVariant::PureWide { .. } => None,
        }
    }

    pub fn wide_width(&self) -> Option<usize> {
        match self {
            BlockVariant::DualPath { d_ffn_wide, .. } | BlockVariant::PureWide { d_ffn_wide } => {
                Some(*d_ffn_wide)
            }
            BlockVariant::PureLoop { .. } => None,
        }
    }

    pub fn has_deep(&self) -> bool {
        self.deep_width().is_some()
    }

    pub fn has_wide(&self) -> bool {
        self.wide_width().is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.loops() == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        for w in self.deep_width().into_iter().chain(self.wide_width()) {
            if w == 0 || w % 64 != 0 {
                return Err(Error::Config(format!(
                    "FFN width {w} is not a positive multiple of 64"
                )));
            }
        }
        Ok(())
    }
}

/// Everything needed to instantiate a model deterministically from a seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelSection", into = "ModelSection")]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub variant: BlockVariant,
    pub norm_eps: f64,
    pub init_std: f64,
    /// Initial value of every per-step and wide-path gain logit.
    pub gain_logit_init: f64,
    pub router_bias_init: f64,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, variant: BlockVariant) -> Result<Self> {
        let c = ModelConfig {
            backbone,
            variant,
            norm_eps: 1e-6,
            init_std: 0.02,
            gain_logit_init: -7.0,
            router_bias_init: -2.0,
        };
        c.validate()?;
        Ok(c)
    }

    /// Desk default: 4 layers, width 64, dual-path with K = 4.
    pub fn desk() -> Self {
        ModelConfig::new(
            BackboneConfig::desk(),
            BlockVariant::DualPath {
                loops: 4,
                d_ffn_deep: 192,
                d_ffn_wide: 384,
            },
        )
        .expect("desk config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.variant.validate()?;
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm eps must be positive".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.backbone.layers
    }

    pub fn d_model(&self) -> usize {
        self.backbone.d_model
    }
}

/// Flat `[model]` section as written in config files and manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(rename = "L")]
    pub layers: usize,
    pub d: usize,
    pub h_q: usize,
    pub h_kv: usize,
    pub vocab: usize,
    #[serde(rename = "T_max")]
    pub max_seq_len: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default)]
    pub tie_embeddings: bool,
    pub variant: VariantKind,
    #[serde(rename = "K", default = "one")]
    pub loops: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_ffn: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_ffn_wide: Option<usize>,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_std")]
    pub init_std: f64,
    #[serde(default = "default_gain_logit")]
    pub gain_logit_init: f64,
    #[serde(default = "default_router_bias")]
    pub router_bias_init: f64,
}

fn default_rope_base() -> f64 {
    10_000.0
}
fn one() -> usize {
    1
}
fn default_eps() -> f64 {
    1e-6
}
fn default_std() -> f64 {
    0.02
}
fn default_gain_logit() -> f64 {
    -7.0
}
fn default_router_bias() -> f64 {
    -2.0
}

impl TryFrom<ModelSection> for ModelConfig {
    type Error = Error;

    fn try_from(s: ModelSection) -> Result<Self> {
        let need = |w: Option<usize>, name: &str| {
            w.ok_or_else(|| Error::Config(format!("{name} is required for variant {:?}", s.variant)))
        };
        let variant = match s.variant {
            VariantKind::Dual => BlockVariant::DualPath {
                loops: s.loops,
                d_ffn_deep: need(s.d_ffn, "d_ffn")?,
                d_ffn_wide: need(s.d_ffn_wide, "d_ffn_wide")?,
            },
            VariantKind::PureLoop => BlockVariant::PureLoop {
                loops: s.loops,
                d_ffn: need(s.d_ffn, "d_ffn")?,
            },
            VariantKind::PureWide => BlockVariant::PureWide {
                d_ffn_wide: need(s.d_ffn_wide, "d_ffn_wide")?,
            },
        };
        let c = ModelConfig {
            backbone: BackboneConfig {
                layers: s.layers,
                d_model: s.d,
                heads_q: s.h_q,
                heads_kv: s.h_kv,
                vocab: s.vocab,
                max_seq_len: s.max_seq_len,
                rope_base: s.rope_base,
                tie_embeddings: s.tie_embeddings,
            },
            variant,
            norm_eps: s.norm_eps,
            init_std: s.init_std,
            gain_logit_init: s.gain_logit_init,
            router_bias_init: s.router_bias_init,
        };
        c.validate()?;
        Ok(c)
    }
}

impl From<ModelConfig> for ModelSection {
    fn from(c: ModelConfig) -> Self {
        let b = &c.backbone;
        ModelSection {
            layers: b.layers,
            d: b.d_model,
            h_q: b.heads_q,
            h_kv: b.heads_kv,
            vocab: b.vocab,
            max_seq_len: b.max_seq_len,
            rope_base: b.rope_base,
            tie_embeddings: b.tie_embeddings,
            variant: c.variant.kind(),
            loops: c.variant.loops(),
            d_ffn: c.variant.deep_width(),
            d_ffn_wide: c.variant.wide_width(),
            norm_eps: c.norm_eps,
            init_std: c.init_std,
            gain_logit_init: c.gain_logit_init,
            router_bias_init: c.router_bias_init,
        }
    }
}

/// `[budget]` section: when present, FFN widths are solved instead of given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    #[serde(rename = "F_M")]
    pub budget: u64,
    #[serde(default = "half")]
    pub alloc_fraction: f64,
}

fn half() -> f64 {
    0.5
}

/// A whole run config file with `[model]`, `[train]` and optional `[budget]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<BudgetSection>,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk().into(),
            train: TrainConfig::default(),
            budget: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    /// Resolves the model config, solving widths from `[budget]` if given.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut section = self.model.clone();
        if let Some(budget) = &self.budget {
            let sol = solve_widths(&BudgetQuery {
                budget: budget.budget,
                variant: section.variant,
                loops: section.loops as u64,
                alloc_fraction: budget.alloc_fraction,
                d_model: section.d as u64,
                n_rep: (section.h_q / section.h_kv.max(1)) as u64,
            })?;
            section.d_ffn = sol.d_ffn.map(|w| w as usize);
            section.d_ffn_wide = sol.d_ffn_wide.map(|w| w as usize);
        }
        self.train.validate()?;
        ModelConfig::try_from(section)
    }
}
