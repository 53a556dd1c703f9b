//! Optimizer, learning-rate schedule, training loop and evaluation.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::block::ForwardOptions;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{Batch, Model, EMBED, HEAD};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Optimization recipe and batch shape. Defaults are the desk run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub init_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Save a checkpoint every this many steps; `0` saves only at the end.
    pub checkpoint_every: usize,
    /// Fraction of the corpus held out for evaluation.
    pub holdout_fraction: f64,
    /// Cap on held-out bytes scored by the end-of-run evaluation.
    pub eval_bytes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 3e-3,
            init_lr: 3e-5,
            final_lr: 3e-4,
            warmup_steps: 100,
            total_steps: 2000,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.3,
            grad_clip: 1.0,
            batch_size: 8,
            seq_len: 128,
            seed: 0,
            precision: Precision::F32,
            checkpoint_every: 0,
            holdout_fraction: 0.05,
            eval_bytes: 65_536,
        }
    }
}

impl TrainConfig {
    /// The large-scale recipe: 5e-6 -> 5e-4 over 184 steps, cosine to 5e-5.
    pub fn reference(total_steps: usize) -> Self {
        TrainConfig {
            peak_lr: 5e-4,
            init_lr: 5e-6,
            final_lr: 5e-5,
            warmup_steps: 184,
            total_steps,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.peak_lr > 0.0 && self.init_lr >= 0.0 && self.final_lr >= 0.0) {
            return bad("learning rates must be non-negative with a positive peak".into());
        }
        if self.init_lr > self.peak_lr || self.final_lr > self.peak_lr {
            return bad(format!(
                "init_lr {} and final_lr {} must not exceed peak_lr {}",
                self.init_lr, self.final_lr, self.peak_lr
            ));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("weight decay and clip must be non-negative".into());
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Linear warmup from `init_lr` to `peak_lr`, then cosine to `final_lr`.
pub fn lr_at(step: usize, c: &TrainConfig) -> f64 {
    if step < c.warmup_steps {
        let f = step as f64 / c.warmup_steps as f64;
        return c.init_lr * (1.0 - f) + c.peak_lr * f;
    }
    if step >= c.total_steps {
        return c.final_lr;
    }
    let span = c.total_steps - c.warmup_steps;
    let p = (step - c.warmup_steps) as f64 / span as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
    c.final_lr * (1.0 - cos) + c.peak_lr * cos
}

/// Whether weight decay applies: matrices other than the embedding and head.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() == 2 && name != EMBED && name != HEAD
}

/// `(total_nats / ln 2) / total_bytes`.
pub fn bits_per_byte(total_nats: f64, total_bytes: u64) -> Result<f64> {
    if total_bytes == 0 {
        return Err(Error::Input("bits per byte of zero bytes".into()));
    }
    Ok(total_nats / std::f64::consts::LN_2 / total_bytes as f64)
}

/// AdamW moments and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S: Scalar> {
    /// Completed optimizer steps.
    pub step: usize,
    pub m: IndexMap<String, Tensor<S>>,
    pub v: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &ParameterStore<S>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(n, p)| (n.to_string(), Tensor::zeros(p.value.shape())))
                .collect()
        };
        AdamW { step: 0, m: zeros(), v: zeros() }
    }

    /// One decoupled-decay Adam update from the gradients in `params`.
    pub fn update(&mut self, params: &mut ParameterStore<S>, lr: f64, c: &TrainConfig) -> Result<()> {
        let t = self.step as i32 + 1;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (one, eps) = (S::one(), S::of(c.eps));
        let (bc1, bc2) = (S::of(bc1), S::of(bc2));
        let lr_s = S::of(lr);
        let shrink = S::of(1.0 - lr * c.weight_decay);
        for (name, p) in params.iter_mut() {
            let m = self
                .m
                .get_mut(name)
                .ok_or_else(|| Error::Training { step: self.step, reason: format!("no moment for {name}") })?;
            let v = self.v.get_mut(name).expect("moments share keys");
            let decay = c.weight_decay > 0.0 && decays(name, p.value.shape());
            let grad = p.grad.data();
            let theta = p.value.data_mut();
            for i in 0..theta.len() {
                let g = grad[i];
                let mi = b1 * m.data()[i] + (one - b1) * g;
                let vi = b2 * v.data()[i] + (one - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mut x = theta[i];
                if decay {
                    x = x * shrink;
                }
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                theta[i] = x - lr_s * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> AdamW<T> {
        let c = |m: &IndexMap<String, Tensor<S>>| m.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        AdamW { step: self.step, m: c(&self.m), v: c(&self.v) }
    }
}

/// Scales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(params: &mut ParameterStore<S>, max_norm: f64) -> f64 {
    let norm = params.grad_norm().f64();
    if max_norm > 0.0 && norm > max_norm {
        let k = S::of(max_norm / norm);
        for (_, p) in params.iter_mut() {
            for g in p.grad.data_mut() {
                *g = *g * k;
            }
        }
    }
    norm
}

/// One line of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss_nats: f64,
    pub grad_norm: f64,
}

/// Runs one optimizer step on the batch for step `opt.step`.
pub fn train_step<S: Scalar>(model: &mut Model<S>, opt: &mut AdamW<S>, c: &TrainConfig, corpus: &Corpus) -> Result<StepLog> {
    let step = opt.step;
    let batch = corpus.batch(c.seed, step as u64, c.batch_size, c.seq_len)?;
    let lr = lr_at(step, c);
    model.params.zero_grads();
    let loss = model.loss_and_grad(&batch).map_err(|e| Error::Training { step, reason: e.to_string() })?;
    let grad_norm = clip_grad_norm(&mut model.params, c.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::Training { step, reason: format!("gradient norm is {grad_norm}") });
    }
    opt.update(&mut model.params, lr, c)?;
    Ok(StepLog { step, lr, loss_nats: loss, grad_norm })
}

/// Steps until `opt.step == until`, calling `after` once per completed step.
pub fn train_until<S: Scalar>(
    model: &mut Model<S>,
    opt: &mut AdamW<S>,
    c: &TrainConfig,
    corpus: &Corpus,
    until: usize,
    mut after: impl FnMut(&StepLog, &Model<S>, &AdamW<S>) -> Result<()>,
) -> Result<Vec<StepLog>> {
    c.validate()?;
    if until > c.total_steps {
        return Err(Error::Config(format!("cannot train to step {until} of {}", c.total_steps)));
    }
    let mut log = Vec::with_capacity(until.saturating_sub(opt.step));
    while opt.step < until {
        let entry = train_step(model, opt, c, corpus)?;
        after(&entry, model, opt)?;
        log.push(entry);
    }
    Ok(log)
}

/// Per-token next-token cross-entropy (nats) of `[N×V]` logits, in f64.
pub fn token_nats<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> Result<Vec<f64>> {
    let v = logits.cols();
    if logits.rows() != targets.len() {
        return Err(Error::Shape(format!("{} logit rows for {} targets", logits.rows(), targets.len())));
    }
    logits
        .data()
        .chunks_exact(v)
        .zip(targets)
        .map(|(row, &t)| {
            if t >= v {
                return Err(Error::Input(format!("target {t} outside vocabulary of size {v}")));
            }
            let max = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x.f64() - max).exp()).sum();
            Ok(max + z.ln() - row[t].f64())
        })
        .collect()
}

/// Teacher-forced scores over a byte corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus: String,
    pub tokens: u64,
    pub bytes: u64,
    pub total_nats: f64,
    pub mean_nats: f64,
    pub bits_per_byte: f64,
}

/// Scores every byte after the first of each window exactly once.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    corpus: &Corpus,
    seq_len: usize,
    batch_size: usize,
    opts: &ForwardOptions,
) -> Result<EvalReport> {
    let windows = corpus.eval_windows(seq_len)?;
    let mut total = 0.0;
    let mut tokens = 0u64;
    let mut next_id = 0u64;
    // Windows of equal length are batched; a shorter tail window runs alone.
    let mut i = 0;
    while i < windows.len() {
        let len = windows[i].len();
        let mut j = i;
        while j < windows.len() && j - i < batch_size.max(1) && windows[j].len() == len {
            j += 1;
        }
        let ids: Vec<u64> = (next_id..next_id + (j - i) as u64).collect();
        next_id += (j - i) as u64;
        let batch = Batch::from_windows(&windows[i..j], ids)?;
        let logits = model.batch_logits(&batch, opts)?;
        let nats = token_nats(&logits, &batch.targets)?;
        total += nats.iter().sum::<f64>();
        tokens += nats.len() as u64;
        i = j;
    }
    Ok(EvalReport {
        corpus: corpus.name.clone(),
        tokens,
        bytes: tokens,
        total_nats: total,
        mean_nats: total / tokens as f64,
        bits_per_byte: bits_per_byte(total, tokens)?,
    })
}
