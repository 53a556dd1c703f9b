//! Full decoder: embedding, `L` blocks, final norm and output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::{normal_tensor, SeqLayout};
use crate::block::{block_forward, init_block, ForwardOptions, TokenRoute};
use crate::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::params::{BoundParams, ParameterStore};
use crate::routing::RoutingRecord;
use crate::tensor::{Scalar, Tensor};

pub const EMBED: &str = "embed.weight";
pub const HEAD: &str = "head.weight";
pub const FINAL_NORM: &str = "final_norm.gain";

/// A batch of `B` sequences of length `T`, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    /// Next-token targets, one per input position.
    pub targets: Vec<usize>,
    pub seq_len: usize,
    pub sequence_ids: Vec<u64>,
}

impl Batch {
    /// Splits each window of `T + 1` tokens into inputs and shifted targets.
    pub fn from_windows(windows: &[Vec<usize>], sequence_ids: Vec<u64>) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::Input("batch needs at least one sequence".into()))?;
        if first.len() < 2 {
            return Err(Error::Input("sequence windows need at least two tokens".into()));
        }
        if sequence_ids.len() != windows.len() {
            return Err(shape_err!("{} windows but {} sequence ids", windows.len(), sequence_ids.len()));
        }
        let t = first.len() - 1;
        let mut inputs = Vec::with_capacity(windows.len() * t);
        let mut targets = Vec::with_capacity(windows.len() * t);
        for w in windows {
            if w.len() != t + 1 {
                return Err(shape_err!("ragged batch: window of {} tokens, expected {}", w.len(), t + 1));
            }
            inputs.extend_from_slice(&w[..t]);
            targets.extend_from_slice(&w[1..]);
        }
        Ok(Batch { inputs, targets, seq_len: t, sequence_ids })
    }

    pub fn sequences(&self) -> usize {
        self.sequence_ids.len()
    }

    pub fn layout(&self) -> SeqLayout {
        let mut layout = SeqLayout::new(self.inputs.len(), self.seq_len);
        layout.sequence_ids = self.sequence_ids.clone();
        layout
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.seq_len == 0 || self.inputs.len() != self.seq_len * self.sequence_ids.len() {
            return Err(shape_err!(
                "{} tokens do not form {} sequences of length {}",
                self.inputs.len(),
                self.sequence_ids.len(),
                self.seq_len
            ));
        }
        if self.targets.len() != self.inputs.len() {
            return Err(shape_err!("{} targets for {} inputs", self.targets.len(), self.inputs.len()));
        }
        if self.seq_len > config.backbone.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds T_max {}",
                self.seq_len, config.backbone.max_seq_len
            )));
        }
        Ok(())
    }
}

/// Builds the forward graph and returns `[N×vocab]` logits. With a trace
/// sink, `trace[l]` receives one route per row for layer `l`.
pub fn model_forward<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BoundParams,
    config: &ModelConfig,
    tokens: &[usize],
    layout: &SeqLayout,
    opts: &ForwardOptions,
    mut trace: Option<&mut Vec<Vec<TokenRoute>>>,
) -> Result<Var> {
    if tokens.len() != layout.rows() {
        return Err(shape_err!("{} tokens for a layout of {} rows", tokens.len(), layout.rows()));
    }
    let embed = p.get(EMBED)?;
    let mut x = tape.embedding(embed, tokens)?;
    for layer in 0..config.layers() {
        let sink = match trace.as_deref_mut() {
            Some(t) => {
                t.push(Vec::with_capacity(layout.rows()));
                t.last_mut()
            }
            None => None,
        };
        x = block_forward(tape, p, config, layer, x, layout, opts, sink)?;
    }
    let x = tape.rmsnorm(x, p.get(FINAL_NORM)?, config.norm_eps)?;
    let head = if config.backbone.tie_embeddings {
        tape.transpose(embed)?
    } else {
        p.get(HEAD)?
    };
    tape.matmul(x, head)
}

/// A configuration together with its weights.
#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub params: ParameterStore<S>,
}

impl<S: Scalar> Model<S> {
    /// Deterministic initialization from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = &config.backbone;
        let std = config.init_std;
        let mut params = ParameterStore::new();
        params.insert(EMBED, normal_tensor(&mut rng, &[b.vocab, b.d_model], std));
        for layer in 0..b.layers {
            init_block(&mut params, &mut rng, &config, layer);
        }
        params.insert(FINAL_NORM, Tensor::ones(&[b.d_model]));
        if !b.tie_embeddings {
            params.insert(HEAD, normal_tensor(&mut rng, &[b.d_model, b.vocab], std));
        }
        Ok(Model { config, params })
    }

    /// Wraps existing weights after checking names and shapes against the config.
    pub fn from_params(config: ModelConfig, params: ParameterStore<S>) -> Result<Self> {
        let expected = Model::<S>::init(config.clone(), 0)?.params;
        if expected.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors for this config, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, p) in expected.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if got.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    /// `[N×vocab]` logits for a flattened batch of sequences of length `seq_len`.
    pub fn logits(&self, tokens: &[usize], seq_len: usize, opts: &ForwardOptions) -> Result<Tensor<S>> {
        let layout = layout_for(tokens.len(), seq_len, None, self.config.backbone.max_seq_len)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let out = model_forward(&mut tape, &p, &self.config, tokens, &layout, opts, None)?;
        Ok(tape.value(out).clone())
    }

    /// `[N×vocab]` logits for a batch, honouring its sequence ids.
    pub fn batch_logits(&self, batch: &Batch, opts: &ForwardOptions) -> Result<Tensor<S>> {
        batch.check(&self.config)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let out = model_forward(&mut tape, &p, &self.config, &batch.inputs, &batch.layout(), opts, None)?;
        Ok(tape.value(out).clone())
    }

    /// Mean cross-entropy (nats) without building gradients into the store.
    pub fn loss(&self, batch: &Batch, opts: &ForwardOptions) -> Result<f64> {
        batch.check(&self.config)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let logits = model_forward(&mut tape, &p, &self.config, &batch.inputs, &batch.layout(), opts, None)?;
        let loss = tape.cross_entropy(logits, &batch.targets)?;
        Ok(tape.value(loss).item().f64())
    }

    /// Mean cross-entropy; gradients are added into the store's slots.
    pub fn loss_and_grad(&mut self, batch: &Batch) -> Result<f64> {
        batch.check(&self.config)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let logits = model_forward(
            &mut tape,
            &p,
            &self.config,
            &batch.inputs,
            &batch.layout(),
            &ForwardOptions::default(),
            None,
        )?;
        let loss = tape.cross_entropy(logits, &batch.targets)?;
        let value = tape.value(loss).item().f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss is {value}")));
        }
        tape.backward(loss)?;
        self.params.accumulate_grads(&tape, &p)?;
        Ok(value)
    }

    /// Runs the forward pass and returns logits plus one routing record per
    /// (sequence, layer, token), ordered in that nesting.
    pub fn trace(
        &self,
        tokens: &[usize],
        seq_len: usize,
        sequence_ids: &[u64],
        opts: &ForwardOptions,
    ) -> Result<(Tensor<S>, Vec<RoutingRecord>)> {
        let layout = layout_for(tokens.len(), seq_len, Some(sequence_ids), self.config.backbone.max_seq_len)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let mut per_layer = Vec::with_capacity(self.config.layers());
        let out = model_forward(&mut tape, &p, &self.config, tokens, &layout, opts, Some(&mut per_layer))?;
        let mut records = Vec::with_capacity(per_layer.len() * tokens.len());
        for (b, &sequence_id) in sequence_ids.iter().enumerate() {
            for (layer, routes) in per_layer.iter().enumerate() {
                for t in 0..seq_len {
                    let r = b * seq_len + t;
                    records.push(RoutingRecord::from_route(sequence_id, layer, t, tokens[r], &routes[r]));
                }
            }
        }
        Ok((tape.value(out).clone(), records))
    }
}

fn layout_for(rows: usize, seq_len: usize, ids: Option<&[u64]>, t_max: usize) -> Result<SeqLayout> {
    if seq_len == 0 || rows == 0 || rows % seq_len != 0 {
        return Err(shape_err!("{rows} tokens do not split into sequences of length {seq_len}"));
    }
    if seq_len > t_max {
        return Err(Error::Input(format!("sequence length {seq_len} exceeds T_max {t_max}")));
    }
    let mut layout = SeqLayout::new(rows, seq_len);
    if let Some(ids) = ids {
        if ids.len() != rows / seq_len {
            return Err(shape_err!("{} sequence ids for {} sequences", ids.len(), rows / seq_len));
        }
        layout.sequence_ids = ids.to_vec();
    }
    Ok(layout)
}
