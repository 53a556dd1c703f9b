//! The dual-path layer and its single-axis reductions.
//!
//! A dual-path block runs two sublayers on the same input `x`:
//!
//! * the deep path re-applies one shared sublayer `K` times with a learned
//!   gain per step and mixes the intermediate states with a stick-breaking
//!   loop router;
//! * the wide path applies a sublayer with a wider FFN once.
//!
//! Two independent per-token sigmoid gates computed from `x` combine them:
//! `y = g_d * h_deep + g_w * h_wide`. Each path carries its own residual, so
//! no outer residual is added.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::{init_sublayer, sublayer, SeqLayout, SublayerNames};
use crate::config::{BlockVariant, ModelConfig};
use crate::error::{shape_err, Error, Result};
use crate::params::{BoundParams, ParameterStore};
use crate::routing::{deep_share, path_cosine};
use crate::tensor::{Scalar, Tensor};

/// Fixed gate values applied instead of the learned ones.
#[derive(Clone, Debug, PartialEq)]
pub struct GateOverride {
    pub deep: Option<f64>,
    pub wide: Option<f64>,
    /// Layers the override applies to; `None` means every layer.
    pub layers: Option<Vec<usize>>,
}

impl GateOverride {
    pub fn uniform(deep: Option<f64>, wide: Option<f64>) -> Self {
        GateOverride { deep, wide, layers: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.deep.is_none() && self.wide.is_none() {
            return Err(Error::Input("a gate override needs at least one fixed gate".into()));
        }
        for g in self.deep.iter().chain(self.wide.iter()) {
            if !(0.0..=1.0).contains(g) {
                return Err(Error::Input(format!("gate value {g} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn applies_to(&self, layer: usize) -> bool {
        self.layers.as_ref().map_or(true, |ls| ls.contains(&layer))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub enum GateMode {
    #[default]
    Learned,
    Override(GateOverride),
    /// Permute the learned `(g_d, g_w)` pairs across positions of each
    /// sequence, independently per layer.
    Shuffle { seed: u64 },
}

/// Inference-time interventions. The default is the plain trained model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Run the deep path for exactly this many steps.
    pub force_loops: Option<usize>,
    pub gates: GateMode,
    /// Fixed loop-router weights `q_1..q_{K-1}` for every token.
    pub router_override: Option<Vec<f64>>,
    /// Fixed gain `s` for every sublayer instead of `softplus(logit)`.
    pub gain_override: Option<f64>,
    /// Evaluate the wide path before the deep path.
    pub wide_first: bool,
}

/// Per-token routing read-out of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenRoute {
    pub g_d: f64,
    pub g_w: f64,
    pub norm_dd: f64,
    pub norm_dw: f64,
    pub cos_dw: f64,
    pub rho_d: f64,
    pub degenerate: bool,
    pub q_steps: Vec<f64>,
}

pub(crate) fn layer_prefix(layer: usize) -> String {
    format!("layers.{layer}")
}

/// Adds one block's parameters for `config.variant`.
pub(crate) fn init_block<S: Scalar, R: Rng>(store: &mut ParameterStore<S>, rng: &mut R, config: &ModelConfig, layer: usize) {
    let d = config.d_model();
    let pre = layer_prefix(layer);
    let v = &config.variant;
    if let Some(w) = v.deep_width() {
        init_sublayer(store, rng, config, &format!("{pre}.deep"), w);
        store.insert(
            format!("{pre}.deep.gain_logits"),
            Tensor::full(&[v.loops()], S::of(config.gain_logit_init)),
        );
        store.insert(format!("{pre}.loop_router.weight"), Tensor::zeros(&[d + 1, 1]));
        store.insert(
            format!("{pre}.loop_router.bias"),
            Tensor::scalar(S::of(config.router_bias_init)),
        );
    }
    if let Some(w) = v.wide_width() {
        init_sublayer(store, rng, config, &format!("{pre}.wide"), w);
        store.insert(
            format!("{pre}.wide.gain_logit"),
            Tensor::scalar(S::of(config.gain_logit_init)),
        );
    }
    if matches!(v, BlockVariant::DualPath { .. }) {
        store.insert(format!("{pre}.gate.weight"), Tensor::zeros(&[d, 2]));
        store.insert(format!("{pre}.gate.bias"), Tensor::zeros(&[2]));
    }
}

/// Stick-breaking weights over `K = q.len() + 1` loop states:
/// `w_k = q_k * prod_{j<k}(1 - q_j)` for `k < K` and `w_K = prod_{j<K}(1 - q_j)`.
pub fn loop_mix_weights(q: &[f64]) -> Vec<f64> {
    let mut remaining = 1.0;
    let mut w = Vec::with_capacity(q.len() + 1);
    for &qk in q {
        w.push(remaining * qk);
        remaining *= 1.0 - qk;
    }
    w.push(remaining);
    w
}

fn gain<S: Scalar>(tape: &mut Tape<S>, logits: Var, index: usize, opts: &ForwardOptions) -> Result<Var> {
    if let Some(s) = opts.gain_override {
        if !(s >= 0.0) {
            return Err(Error::Input(format!("gain override {s} must be non-negative")));
        }
        return Ok(tape.constant(Tensor::scalar(S::of(s))));
    }
    let logit = tape.select(logits, index)?;
    Ok(tape.softplus(logit))
}

/// States and router weights produced by the deep path.
#[derive(Clone, Debug)]
pub struct DeepPathOutput {
    pub h: Var,
    /// `h^(1) .. h^(K)`.
    pub states: Vec<Var>,
    /// `q_1 .. q_{K-1}`, each `[N×1]`.
    pub router: Vec<Var>,
}

/// `h^(k) = Phi_deep(h^(k-1); s_k)` for `k = 1..K`, mixed by the loop router.
///
/// When `K` is forced above the trained depth, steps past it reuse the last
/// trained gain. The router's step feature is `k / (K - 1)` for the depth
/// actually run.
pub fn deep_path<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BoundParams,
    config: &ModelConfig,
    layer: usize,
    x: Var,
    layout: &SeqLayout,
    opts: &ForwardOptions,
) -> Result<DeepPathOutput> {
    let trained = config.variant.loops();
    let loops = opts.force_loops.unwrap_or(trained);
    if loops == 0 {
        return Err(Error::Input("forced loop count must be at least 1".into()));
    }
    if let Some(q) = &opts.router_override {
        if q.len() != loops - 1 {
            return Err(Error::Input(format!(
                "router override has {} weights, expected {}",
                q.len(),
                loops - 1
            )));
        }
    }
    let pre = layer_prefix(layer);
    let names = SublayerNames::new(&format!("{pre}.deep"));
    let logits = p.get(&format!("{pre}.deep.gain_logits"))?;
    let mut states = Vec::with_capacity(loops);
    let mut h = x;
    for k in 1..=loops {
        let s = gain(tape, logits, k.min(trained) - 1, opts)?;
        h = sublayer(tape, p, config, &names, h, s, layout)?;
        states.push(h);
    }
    if loops == 1 {
        return Ok(DeepPathOutput { h: states[0], states, router: Vec::new() });
    }
    let n = layout.rows();
    let w_r = p.get(&format!("{pre}.loop_router.weight"))?;
    let b_r = p.get(&format!("{pre}.loop_router.bias"))?;
    // Mixed as h^(K) + sum_k w_k (h^(k) - h^(K)), so equal states mix to
    // exactly that state.
    let last = states[loops - 1];
    let mut router = Vec::with_capacity(loops - 1);
    let mut mixed: Option<Var> = None;
    let mut remaining: Option<Var> = None;
    for k in 1..loops {
        let state = states[k - 1];
        let q = match &opts.router_override {
            Some(qs) => tape.constant(Tensor::full(&[n, 1], S::of(qs[k - 1]))),
            None => {
                let step = k as f64 / (loops - 1) as f64;
                let feat = tape.constant(Tensor::full(&[n, 1], S::of(step)));
                let inp = tape.concat_cols(state, feat)?;
                let logit = tape.matmul(inp, w_r)?;
                let logit = tape.add_row(logit, b_r)?;
                tape.sigmoid(logit)
            }
        };
        router.push(q);
        let weight = match remaining {
            None => q,
            Some(r) => tape.mul(r, q)?,
        };
        let diff = tape.sub(state, last)?;
        let term = tape.scale_rows(diff, weight)?;
        mixed = Some(match mixed {
            None => term,
            Some(m) => tape.add(m, term)?,
        });
        if k + 1 < loops {
            let keep = tape.one_minus(q);
            remaining = Some(match remaining {
                None => keep,
                Some(r) => tape.mul(r, keep)?,
            });
        }
    }
    let h = tape.add(last, mixed.expect("loops > 1"))?;
    Ok(DeepPathOutput { h, states, router })
}

/// One pass of the wide sublayer with gain `softplus(beta)`.
pub fn wide_path<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BoundParams,
    config: &ModelConfig,
    layer: usize,
    x: Var,
    layout: &SeqLayout,
    opts: &ForwardOptions,
) -> Result<Var> {
    let pre = layer_prefix(layer);
    let names = SublayerNames::new(&format!("{pre}.wide"));
    let s = gain(tape, p.get(&format!("{pre}.wide.gain_logit"))?, 0, opts)?;
    sublayer(tape, p, config, &names, x, s, layout)
}

/// Gate values `[N×1]` for each path.
#[derive(Clone, Copy, Debug)]
pub struct Gates {
    pub deep: Var,
    pub wide: Var,
}

fn shuffle_index(seed: u64, layer: usize, layout: &SeqLayout) -> Vec<usize> {
    let t = layout.seq_len;
    let mut index = Vec::with_capacity(layout.rows());
    for (b, &seq) in layout.sequence_ids.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((layer as u64) << 48) ^ seq);
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut rng);
        index.extend(perm.into_iter().map(|j| b * t + j));
    }
    index
}

/// `(l_d, l_w) = x W_g + b_g`, `g = sigmoid(l)`, with interventions applied.
pub fn gates<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BoundParams,
    layer: usize,
    x: Var,
    layout: &SeqLayout,
    opts: &ForwardOptions,
) -> Result<Gates> {
    let pre = layer_prefix(layer);
    let logits = tape.matmul(x, p.get(&format!("{pre}.gate.weight"))?)?;
    let logits = tape.add_row(logits, p.get(&format!("{pre}.gate.bias"))?)?;
    let mut g = tape.sigmoid(logits);
    if let GateMode::Shuffle { seed } = opts.gates {
        g = tape.gather_rows(g, shuffle_index(seed, layer, layout))?;
    }
    let mut deep = tape.column(g, 0)?;
    let mut wide = tape.column(g, 1)?;
    if let GateMode::Override(o) = &opts.gates {
        o.validate()?;
        if o.applies_to(layer) {
            let n = layout.rows();
            if let Some(v) = o.deep {
                deep = tape.constant(Tensor::full(&[n, 1], S::of(v)));
            }
            if let Some(v) = o.wide {
                wide = tape.constant(Tensor::full(&[n, 1], S::of(v)));
            }
        }
    }
    Ok(Gates { deep, wide })
}

/// `y = g_d * h_deep + g_w * h_wide`, gates broadcast over channels.
pub fn gate_combine<S: Scalar>(tape: &mut Tape<S>, h_deep: Var, h_wide: Var, g: Gates) -> Result<Var> {
    let a = tape.scale_rows(h_deep, g.deep)?;
    let b = tape.scale_rows(h_wide, g.wide)?;
    tape.add(a, b)
}

fn read_routes<S: Scalar>(
    tape: &Tape<S>,
    x: Var,
    h_deep: Option<Var>,
    h_wide: Option<Var>,
    gates: Option<Gates>,
    router: &[Var],
) -> Vec<TokenRoute> {
    let xv = tape.value(x);
    let d = xv.cols();
    let rows = xv.rows();
    let col = |v: Var| tape.value(v).to_f64_vec();
    let (gd, gw) = match (gates, h_deep.is_some()) {
        (Some(g), _) => (col(g.deep), col(g.wide)),
        (None, true) => (vec![1.0; rows], vec![0.0; rows]),
        (None, false) => (vec![0.0; rows], vec![1.0; rows]),
    };
    let qs: Vec<Vec<f64>> = router.iter().map(|&q| col(q)).collect();
    let delta = |h: Option<Var>, r: usize| -> Vec<f64> {
        match h {
            Some(h) => {
                let hv = &tape.value(h).data()[r * d..(r + 1) * d];
                let xr = &xv.data()[r * d..(r + 1) * d];
                hv.iter().zip(xr).map(|(&a, &b)| a.f64() - b.f64()).collect()
            }
            None => vec![0.0; d],
        }
    };
    (0..rows)
        .map(|r| {
            let dd = delta(h_deep, r);
            let dw = delta(h_wide, r);
            let norm_dd = dd.iter().map(|v| v * v).sum::<f64>().sqrt();
            let norm_dw = dw.iter().map(|v| v * v).sum::<f64>().sqrt();
            let share = deep_share(gd[r], gw[r], norm_dd, norm_dw);
            TokenRoute {
                g_d: gd[r],
                g_w: gw[r],
                norm_dd,
                norm_dw,
                cos_dw: path_cosine(&dd, &dw),
                rho_d: share.rho_d,
                degenerate: share.degenerate,
                q_steps: qs.iter().map(|q| q[r]).collect(),
            }
        })
        .collect()
}

/// Runs one block. With a trace sink, pushes one [`TokenRoute`] per row.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BoundParams,
    config: &ModelConfig,
    layer: usize,
    x: Var,
    layout: &SeqLayout,
    opts: &ForwardOptions,
    trace: Option<&mut Vec<TokenRoute>>,
) -> Result<Var> {
    let v = &config.variant;
    let run_deep = |tape: &mut Tape<S>| deep_path(tape, p, config, layer, x, layout, opts);
    let run_wide = |tape: &mut Tape<S>| wide_path(tape, p, config, layer, x, layout, opts);
    let (deep, wide) = match (v.has_deep(), v.has_wide()) {
        (true, true) if opts.wide_first => {
            let w = run_wide(tape)?;
            (Some(run_deep(tape)?), Some(w))
        }
        (true, true) => {
            let d = run_deep(tape)?;
            (Some(d), Some(run_wide(tape)?))
        }
        (true, false) => (Some(run_deep(tape)?), None),
        (false, true) => (None, Some(run_wide(tape)?)),
        (false, false) => return Err(shape_err!("block has neither path")),
    };
    let h_deep = deep.as_ref().map(|d| d.h);
    let (y, g) = match (h_deep, wide) {
        (Some(hd), Some(hw)) => {
            let g = gates(tape, p, layer, x, layout, opts)?;
            (gate_combine(tape, hd, hw, g)?, Some(g))
        }
        (Some(hd), None) => (hd, None),
        (None, Some(hw)) => (hw, None),
        (None, None) => unreachable!(),
    };
    if let Some(sink) = trace {
        let router = deep.as_ref().map(|d| d.router.as_slice()).unwrap_or(&[]);
        sink.extend(read_routes(tape, x, h_deep, wide, g, router));
    }
    Ok(y)
}
