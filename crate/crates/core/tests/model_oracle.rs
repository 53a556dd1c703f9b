//! Straight-line re-implementation of the forward pass without the tape,
//! compared against `Model::logits`.

mod common;

use common::{backbone, random_model, scramble};
use dualpath::backbone::{attention, SeqLayout, SublayerNames};
use dualpath::{BlockVariant, Model, ModelConfig, ParameterStore, Tape, Tensor};

struct Oracle<'a> {
    p: &'a ParameterStore<f64>,
    c: &'a ModelConfig,
}

type Rows = Vec<Vec<f64>>;

impl Oracle<'_> {
    fn w(&self, name: &str) -> (&[f64], usize) {
        let t = self.p.get(name).unwrap_or_else(|| panic!("missing {name}"));
        (t.data(), *t.shape().last().unwrap())
    }

    fn linear(&self, xs: &Rows, name: &str) -> Rows {
        let (w, cols) = self.w(name);
        xs.iter()
            .map(|x| {
                (0..cols)
                    .map(|j| x.iter().enumerate().map(|(i, xi)| xi * w[i * cols + j]).sum())
                    .collect()
            })
            .collect()
    }

    fn rms(&self, x: &[f64], gain: &[f64]) -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let r = (ms + self.c.norm_eps).sqrt();
        x.iter().zip(gain).map(|(v, g)| v / r * g).collect()
    }

    fn norm_rows(&self, xs: &Rows, name: &str) -> Rows {
        let (g, _) = self.w(name);
        xs.iter().map(|x| self.rms(x, g)).collect()
    }

    fn rope(&self, v: &mut [f64], pos: usize) {
        let dh = v.len();
        for i in 0..dh / 2 {
            let theta = pos as f64 / self.c.backbone.rope_base.powf(2.0 * i as f64 / dh as f64);
            let (a, b) = (v[2 * i], v[2 * i + 1]);
            v[2 * i] = a * theta.cos() - b * theta.sin();
            v[2 * i + 1] = a * theta.sin() + b * theta.cos();
        }
    }

    fn attn(&self, xs: &Rows, n: &SublayerNames) -> Rows {
        let heads = self.c.backbone.heads_q;
        let dh = self.c.backbone.head_dim();
        let q = self.linear(xs, &n.w_q);
        let k = self.linear(xs, &n.w_k);
        let v = self.linear(xs, &n.w_v);
        let (gq, _) = self.w(&n.q_norm);
        let (gk, _) = self.w(&n.k_norm);
        let t = xs.len();
        let mut out = vec![vec![0.0; heads * dh]; t];
        for h in 0..heads {
            let head = |m: &Rows, g: &[f64], i: usize| {
                let mut v = self.rms(&m[i][h * dh..(h + 1) * dh], g);
                self.rope(&mut v, i);
                v
            };
            for i in 0..t {
                let qi = head(&q, gq, i);
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let kj = head(&k, gk, j);
                        qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let p = (s - max).exp() / z;
                    for c in 0..dh {
                        out[i][h * dh + c] += p * v[j][h * dh + c];
                    }
                }
            }
        }
        self.linear(&out, &n.w_o)
    }

    fn ffn(&self, xs: &Rows, n: &SublayerNames) -> Rows {
        let g = self.linear(xs, &n.w_gate);
        let u = self.linear(xs, &n.w_up);
        let h: Rows = g
            .iter()
            .zip(&u)
            .map(|(g, u)| g.iter().zip(u).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect())
            .collect();
        self.linear(&h, &n.w_down)
    }

    fn sublayer(&self, xs: &Rows, prefix: &str, s: f64) -> Rows {
        let n = SublayerNames::new(prefix);
        let a = self.attn(&self.norm_rows(xs, &n.attn_norm), &n);
        let u: Rows = xs.iter().zip(&a).map(|(x, a)| x.iter().zip(a).map(|(x, a)| x + s * a).collect()).collect();
        let f = self.ffn(&self.norm_rows(&u, &n.ffn_norm), &n);
        u.iter().zip(&f).map(|(u, f)| u.iter().zip(f).map(|(u, f)| u + s * f).collect()).collect()
    }

    fn softplus(x: f64) -> f64 {
        (1.0 + x.exp()).ln()
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn deep(&self, xs: &Rows, layer: usize, k_total: usize) -> Rows {
        let pre = format!("layers.{layer}");
        let (alpha, _) = self.w(&format!("{pre}.deep.gain_logits"));
        let mut states = Vec::new();
        let mut h = xs.clone();
        for k in 0..k_total {
            h = self.sublayer(&h, &format!("{pre}.deep"), Self::softplus(alpha[k]));
            states.push(h.clone());
        }
        if k_total == 1 {
            return h;
        }
        let (wr, _) = self.w(&format!("{pre}.loop_router.weight"));
        let (br, _) = self.w(&format!("{pre}.loop_router.bias"));
        let d = xs[0].len();
        (0..xs.len())
            .map(|t| {
                let mut out = vec![0.0; d];
                let mut pi = 1.0;
                for k in 0..k_total - 1 {
                    let hk = &states[k][t];
                    let feat = (k + 1) as f64 / (k_total - 1) as f64;
                    let logit: f64 = hk.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>() + feat * wr[d] + br[0];
                    let q = Self::sigmoid(logit);
                    for c in 0..d {
                        out[c] += pi * q * hk[c];
                    }
                    pi *= 1.0 - q;
                }
                for c in 0..d {
                    out[c] += pi * states[k_total - 1][t][c];
                }
                out
            })
            .collect()
    }

    fn wide(&self, xs: &Rows, layer: usize) -> Rows {
        let (beta, _) = self.w(&format!("layers.{layer}.wide.gain_logit"));
        self.sublayer(xs, &format!("layers.{layer}.wide"), Self::softplus(beta[0]))
    }

    fn logits(&self, tokens: &[usize]) -> Rows {
        let (emb, d) = self.w("embed.weight");
        let mut xs: Rows = tokens.iter().map(|&t| emb[t * d..(t + 1) * d].to_vec()).collect();
        for layer in 0..self.c.layers() {
            xs = match self.c.variant {
                BlockVariant::PureLoop { loops, .. } => self.deep(&xs, layer, loops),
                BlockVariant::PureWide { .. } => self.wide(&xs, layer),
                BlockVariant::DualPath { loops, .. } => {
                    let hd = self.deep(&xs, layer, loops);
                    let hw = self.wide(&xs, layer);
                    let gl = self.linear(&xs, &format!("layers.{layer}.gate.weight"));
                    let (gb, _) = self.w(&format!("layers.{layer}.gate.bias"));
                    (0..xs.len())
                        .map(|t| {
                            let gd = Self::sigmoid(gl[t][0] + gb[0]);
                            let gw = Self::sigmoid(gl[t][1] + gb[1]);
                            hd[t].iter().zip(&hw[t]).map(|(a, b)| gd * a + gw * b).collect()
                        })
                        .collect()
                }
            };
        }
        let xs = self.norm_rows(&xs, "final_norm.gain");
        if self.c.backbone.tie_embeddings {
            let vocab = self.c.backbone.vocab;
            xs.iter()
                .map(|x| (0..vocab).map(|v| x.iter().zip(&emb[v * d..(v + 1) * d]).map(|(a, b)| a * b).sum()).collect())
                .collect()
        } else {
            self.linear(&xs, "head.weight")
        }
    }
}

fn check(config: ModelConfig, seed: u64) {
    let model: Model<f64> = random_model(config.clone(), seed, 0.4);
    let tokens = common::random_tokens(6, config.backbone.vocab, seed + 1);
    let got = model.logits(&tokens, tokens.len(), &Default::default()).unwrap();
    assert_eq!(got.shape(), &[6, config.backbone.vocab]);
    let want = Oracle { p: &model.params, c: &config }.logits(&tokens);
    for (t, row) in want.iter().enumerate() {
        for (v, w) in row.iter().enumerate() {
            let g = got.data()[t * config.backbone.vocab + v];
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{t},{v}: {g} vs {w}");
        }
    }
}

fn d4(variant: BlockVariant, tie: bool) -> ModelConfig {
    let mut b = backbone(1, 4, 2, 8);
    b.tie_embeddings = tie;
    ModelConfig::new(b, variant).unwrap()
}

#[test]
fn dual_path_logits_match_oracle() {
    for (k, seed) in [(1, 3), (2, 5), (3, 7)] {
        check(d4(BlockVariant::DualPath { loops: k, d_ffn_deep: 64, d_ffn_wide: 128 }, false), seed);
    }
}

#[test]
fn reductions_and_tied_head_match_oracle() {
    check(d4(BlockVariant::PureLoop { loops: 3, d_ffn: 64 }, false), 11);
    check(d4(BlockVariant::PureWide { d_ffn_wide: 192 }, false), 12);
    check(d4(BlockVariant::DualPath { loops: 2, d_ffn_deep: 64, d_ffn_wide: 64 }, true), 13);
}

#[test]
fn deeper_model_matches_oracle() {
    let mut c = common::tiny(2, 3);
    c.backbone.heads_q = 4;
    c.backbone.heads_kv = 4;
    check(c, 21);
}

#[test]
fn two_token_attention_hand_weights() {
    // d = 4, two heads of width 2, identity projections, unit gains.
    let config = d4(BlockVariant::PureWide { d_ffn_wide: 64 }, false);
    let mut model: Model<f64> = Model::init(config.clone(), 0).unwrap();
    let n = SublayerNames::new("layers.0.wide");
    for name in [&n.w_q, &n.w_k, &n.w_v, &n.w_o] {
        *model.params.value_mut(name).unwrap() = Tensor::identity(4);
    }
    let x = Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.5, -0.5, 0.0, 2.0, -1.0, 1.0]).unwrap();
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let out = attention(&mut tape, &p, &config, &n, xv, &SeqLayout::new(2, 2)).unwrap();
    let got = tape.value(out).data().to_vec();

    // Row 0 attends only to itself: output is v_0.
    assert_eq!(&got[..4], &x.data()[..4]);
    // Row 1 mixes v_0 and v_1 per head with softmax over normalized, rotated scores.
    let eps = 1e-6;
    let rms = |a: f64, b: f64| ((a * a + b * b) / 2.0 + eps).sqrt();
    let rot = |a: f64, b: f64, pos: f64| (a * pos.cos() - b * pos.sin(), a * pos.sin() + b * pos.cos());
    for h in 0..2 {
        let (q0, q1) = (x.data()[4 + 2 * h], x.data()[5 + 2 * h]);
        let r = rms(q0, q1);
        let q = rot(q0 / r, q1 / r, 1.0);
        let mut s = [0.0; 2];
        for (j, sj) in s.iter_mut().enumerate() {
            let (k0, k1) = (x.data()[4 * j + 2 * h], x.data()[4 * j + 2 * h + 1]);
            let rk = rms(k0, k1);
            let k = rot(k0 / rk, k1 / rk, j as f64);
            *sj = (q.0 * k.0 + q.1 * k.1) / 2f64.sqrt();
        }
        let p0 = 1.0 / (1.0 + (s[1] - s[0]).exp());
        for c in 0..2 {
            let want = p0 * x.data()[2 * h + c] + (1.0 - p0) * x.data()[4 + 2 * h + c];
            assert!((got[4 + 2 * h + c] - want).abs() < 1e-14, "head {h} col {c}");
        }
    }
}

#[test]
fn scrambled_gates_are_not_symmetric() {
    // Guards the oracle comparisons above against degenerate parameters.
    let mut m: Model<f64> = Model::init(common::tiny(1, 2), 1).unwrap();
    scramble(&mut m, 2, 0.4);
    let g = m.params.value("layers.0.gate.weight").unwrap();
    assert!(g.data().iter().any(|&v| v.abs() > 0.1));
}
