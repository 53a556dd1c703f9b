//! Variant-independent decoder pieces: QK-normalized causal attention with
//! rotary positions, SwiGLU feed-forward, and the pre-norm sublayer with a
//! scalar gain on both residual branches.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::flops::h_eff;
use crate::params::{BoundParams, ParameterStore};
use crate::tensor::{Scalar, Tensor};

/// Per-call sequence layout: `N = batch * seq_len` rows.
#[derive(Clone, Debug)]
pub struct SeqLayout {
    pub seq_len: usize,
    pub positions: Vec<usize>,
    /// One id per sequence; keys per-sequence randomness such as gate shuffles.
    pub sequence_ids: Vec<u64>,
}

impl SeqLayout {
    pub fn new(rows: usize, seq_len: usize) -> Self {
        SeqLayout {
            seq_len,
            positions: (0..rows).map(|r| r % seq_len).collect(),
            sequence_ids: (0..(rows / seq_len.max(1)) as u64).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }
}

/// Parameter names of one attention + SwiGLU sublayer under `prefix`.
#[derive(Clone, Debug)]
pub struct SublayerNames {
    pub attn_norm: String,
    pub w_q: String,
    pub w_k: String,
    pub w_v: String,
    pub w_o: String,
    pub q_norm: String,
    pub k_norm: String,
    pub ffn_norm: String,
    pub w_gate: String,
    pub w_up: String,
    pub w_down: String,
}

impl SublayerNames {
    pub fn new(prefix: &str) -> Self {
        let n = |s: &str| format!("{prefix}.{s}");
        SublayerNames {
            attn_norm: n("attn_norm.gain"),
            w_q: n("attn.w_q"),
            w_k: n("attn.w_k"),
            w_v: n("attn.w_v"),
            w_o: n("attn.w_o"),
            q_norm: n("attn.q_norm.gain"),
            k_norm: n("attn.k_norm.gain"),
            ffn_norm: n("ffn_norm.gain"),
            w_gate: n("ffn.w_gate"),
            w_up: n("ffn.w_up"),
            w_down: n("ffn.w_down"),
        }
    }
}

pub(crate) fn normal_tensor<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::of(dist.sample(rng))).collect();
    Tensor::raw(shape.to_vec(), data)
}

/// Adds one sublayer's weights to `store`.
pub(crate) fn init_sublayer<S: Scalar, R: Rng>(
    store: &mut ParameterStore<S>,
    rng: &mut R,
    config: &ModelConfig,
    prefix: &str,
    d_ffn: usize,
) {
    let b = &config.backbone;
    let d = b.d_model;
    let dh = b.head_dim();
    let kv = b.heads_kv * dh;
    let hidden = h_eff(d_ffn as u64) as usize;
    let std = config.init_std;
    let n = SublayerNames::new(prefix);
    store.insert(n.attn_norm, Tensor::ones(&[d]));
    store.insert(n.w_q, normal_tensor(rng, &[d, d], std));
    store.insert(n.w_k, normal_tensor(rng, &[d, kv], std));
    store.insert(n.w_v, normal_tensor(rng, &[d, kv], std));
    store.insert(n.w_o, normal_tensor(rng, &[d, d], std));
    store.insert(n.q_norm, Tensor::ones(&[dh]));
    store.insert(n.k_norm, Tensor::ones(&[dh]));
    store.insert(n.ffn_norm, Tensor::ones(&[d]));
    store.insert(n.w_gate, normal_tensor(rng, &[d, hidden], std));
    store.insert(n.w_up, normal_tensor(rng, &[d, hidden], std));
    store.insert(n.w_down, normal_tensor(rng, &[hidden, d], std));
}

/// Causal multi-head attention of already-normalized input `x`.
///
/// Queries and keys are RMS-normalized per head (one gain of length `d_head`
/// shared across heads) after projection and before the rotary encoding.
pub fn attention<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BoundParams,
    config: &ModelConfig,
    names: &SublayerNames,
    x: Var,
    layout: &SeqLayout,
) -> Result<Var> {
    let b = &config.backbone;
    let n = layout.rows();
    let dh = b.head_dim();
    let q = tape.matmul(x, p.get(&names.w_q)?)?;
    let k = tape.matmul(x, p.get(&names.w_k)?)?;
    let v = tape.matmul(x, p.get(&names.w_v)?)?;
    let q = qk_norm_rope(tape, q, p.get(&names.q_norm)?, b.heads_q, n, dh, config, layout)?;
    let k = qk_norm_rope(tape, k, p.get(&names.k_norm)?, b.heads_kv, n, dh, config, layout)?;
    let o = tape.causal_attention(q, k, v, b.heads_q, b.heads_kv, layout.seq_len)?;
    tape.matmul(o, p.get(&names.w_o)?)
}

#[allow(clippy::too_many_arguments)]
fn qk_norm_rope<S: Scalar>(
    tape: &mut Tape<S>,
    t: Var,
    gain: Var,
    heads: usize,
    n: usize,
    dh: usize,
    config: &ModelConfig,
    layout: &SeqLayout,
) -> Result<Var> {
    let per_head = tape.reshape(t, &[n * heads, dh])?;
    let normed = tape.rmsnorm(per_head, gain, config.norm_eps)?;
    let back = tape.reshape(normed, &[n, heads * dh])?;
    tape.rope(back, heads, &layout.positions, config.backbone.rope_base)
}

/// `(SiLU(x W_gate) * (x W_up)) W_down`.
pub fn swiglu<S: Scalar>(tape: &mut Tape<S>, p: &BoundParams, names: &SublayerNames, x: Var) -> Result<Var> {
    let gate = tape.matmul(x, p.get(&names.w_gate)?)?;
    let up = tape.matmul(x, p.get(&names.w_up)?)?;
    let act = tape.silu(gate);
    let h = tape.mul(act, up)?;
    tape.matmul(h, p.get(&names.w_down)?)
}

/// Pre-norm residual sublayer with gain `s` on both branches:
/// `u = x + s*Attn(norm(x))`, `out = u + s*FFN(norm(u))`.
pub fn sublayer<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BoundParams,
    config: &ModelConfig,
    names: &SublayerNames,
    x: Var,
    gain: Var,
    layout: &SeqLayout,
) -> Result<Var> {
    let n1 = tape.rmsnorm(x, p.get(&names.attn_norm)?, config.norm_eps)?;
    let a = attention(tape, p, config, names, n1, layout)?;
    let a = tape.scale(a, gain)?;
    let u = tape.add(x, a)?;
    let n2 = tape.rmsnorm(u, p.get(&names.ffn_norm)?, config.norm_eps)?;
    let f = swiglu(tape, p, names, n2)?;
    let f = tape.scale(f, gain)?;
    tape.add(u, f)
}
