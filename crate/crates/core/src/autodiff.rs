//! Eager reverse-mode automatic differentiation over dense tensors.
//!
//! Every op computes its value immediately and appends a node to the [`Tape`].
//! [`Tape::backward`] walks the nodes in reverse recording order and adds the
//! resulting gradients into the leaf slots; it never overwrites them.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, sigmoid, softplus, MatMut, MatRef, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, Var),
    ScaleRows(Var, Var),
    OneMinus(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    /// Keeps `sigmoid(a)` for the backward pass when `a` needs a gradient.
    Silu { a: Var, sig: Vec<S> },
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    Column(Var, usize),
    Select(Var, usize),
    GatherRows(Var, Vec<usize>),
    Embedding {
        table: Var,
        tokens: Vec<usize>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<S>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    Rope {
        x: Var,
        heads: usize,
        positions: Vec<usize>,
        base: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads_q: usize,
        heads_kv: usize,
        seq_len: usize,
        probs: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

/// Ordered record of operations. One tape per forward pass.
#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

fn same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn rope_tables(dh: usize, base: f64, pos: usize) -> impl Iterator<Item = (f64, f64)> {
    (0..dh / 2).map(move |i| {
        let freq = base.powf(-2.0 * i as f64 / dh as f64);
        let angle = pos as f64 * freq;
        (angle.cos(), angle.sin())
    })
}

/// Rotates consecutive `(2i, 2i+1)` pairs of every head by `sign * angle(pos, i)`.
fn rotate<S: Scalar>(data: &mut [S], cols: usize, heads: usize, positions: &[usize], base: f64, sign: f64) {
    let dh = cols / heads;
    let max_pos = positions.iter().copied().max().unwrap_or(0);
    let tables: Vec<Vec<(S, S)>> = (0..=max_pos)
        .map(|pos| {
            rope_tables(dh, base, pos)
                .map(|(c, s)| (S::of(c), S::of(sign * s)))
                .collect()
        })
        .collect();
    for (row, &pos) in positions.iter().enumerate() {
        let table = &tables[pos];
        for h in 0..heads {
            let base_ix = row * cols + h * dh;
            for (i, &(c, s)) in table.iter().enumerate() {
                let a = data[base_ix + 2 * i];
                let b = data[base_ix + 2 * i + 1];
                data[base_ix + 2 * i] = a * c - b * s;
                data[base_ix + 2 * i + 1] = a * s + b * c;
            }
        }
    }
}

/// Rotary position encoding applied outside any tape.
pub fn rope_apply<S: Scalar>(x: &Tensor<S>, heads: usize, positions: &[usize], base: f64) -> Result<Tensor<S>> {
    let cols = x.cols();
    check_rope(cols, heads, x.rows(), positions.len())?;
    let mut data = x.data().to_vec();
    rotate(&mut data, cols, heads, positions, base, 1.0);
    Ok(Tensor::raw(x.shape().to_vec(), data))
}

fn check_rope(cols: usize, heads: usize, rows: usize, positions: usize) -> Result<()> {
    if heads == 0 || cols % heads != 0 {
        return Err(shape_err!("{cols} columns do not split into {heads} heads"));
    }
    if (cols / heads) % 2 != 0 {
        return Err(Error::Config(format!(
            "rotary encoding needs an even head dimension, got {}",
            cols / heads
        )));
    }
    if rows != positions {
        return Err(shape_err!("{rows} rows but {positions} positions"));
    }
    Ok(())
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Every recorded value, oldest first.
    pub fn vars(&self) -> impl DoubleEndedIterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Leaves with `requires_grad` collect gradients.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::raw(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn map(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::raw(av.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, what)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::raw(av.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, a: Var, b: Var, what: &str, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let cols = av.cols();
        if bv.numel() != cols || bv.shape().len() != 1 {
            return Err(shape_err!(
                "{what}: {:?} does not broadcast over trailing dim of {:?}",
                bv.shape(),
                av.shape()
            ));
        }
        let data = av
            .data()
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        let value = Tensor::raw(av.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// `a + b` with `b` of shape `[cols]` broadcast across rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast(a, b, "add_row", |x, y| x + y, Op::AddRow(a, b))
    }

    /// `a * g` with `g` of shape `[cols]` broadcast across rows.
    pub fn mul_row(&mut self, a: Var, g: Var) -> Result<Var> {
        self.row_broadcast(a, g, "mul_row", |x, y| x * y, Op::MulRow(a, g))
    }

    /// Multiplies every element by a one-element tensor.
    pub fn scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(shape_err!("scale factor must be a scalar, got {:?}", sv.shape()));
        }
        let k = sv.item();
        let rg = self.rg(&[a, s]);
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * k).collect();
        let value = Tensor::raw(av.shape().to_vec(), data);
        Ok(self.push(value, Op::Scale(a, s), rg))
    }

    /// Multiplies row `i` of `a` by `c[i]`; `c` holds one value per row.
    pub fn scale_rows(&mut self, a: Var, c: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(c));
        let cols = av.cols();
        if cv.numel() != av.rows() {
            return Err(shape_err!(
                "scale_rows: {:?} has {} rows but factors are {:?}",
                av.shape(),
                av.rows(),
                cv.shape()
            ));
        }
        let data = av
            .data()
            .chunks_exact(cols)
            .zip(cv.data())
            .flat_map(|(row, &k)| row.iter().map(move |&x| x * k))
            .collect();
        let value = Tensor::raw(av.shape().to_vec(), data);
        let rg = self.rg(&[a, c]);
        Ok(self.push(value, Op::ScaleRows(a, c), rg))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        self.map(a, |x| S::one() - x, Op::OneMinus(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(bv)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(shape_err!("transpose needs a matrix, got {:?}", av.shape()));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let d = av.data();
        let mut out = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                out.push(d[i * n + j]);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::raw(vec![n, m], out), Op::Transpose(a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let rg = self.rg(&[a]);
        let av = self.value(a);
        let sig: Vec<S> = av.data().iter().map(|&x| sigmoid(x)).collect();
        let data = av.data().iter().zip(&sig).map(|(&x, &s)| x * s).collect();
        let value = Tensor::raw(av.shape().to_vec(), data);
        let sig = if rg { sig } else { Vec::new() };
        self.push(value, Op::Silu { a, sig }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= S::zero()) {
            return Err(Error::Domain(format!("log of non-positive value {bad:?}")));
        }
        Ok(self.map(a, |x| x.ln(), Op::Log(a)))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<S>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().copied().sum::<S>() / S::of(av.numel() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// `[m×p] ++ [m×q] -> [m×(p+q)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.rows() != bv.rows() {
            return Err(shape_err!(
                "concat_cols of {:?} and {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let (m, p, q) = (av.rows(), av.cols(), bv.cols());
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&av.data()[i * p..(i + 1) * p]);
            out.extend_from_slice(&bv.data()[i * q..(i + 1) * q]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::raw(vec![m, p + q], out), Op::ConcatCols(a, b), rg))
    }

    /// Column `j` of a matrix as `[m×1]`.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let av = self.value(a);
        let n = av.cols();
        if j >= n {
            return Err(shape_err!("column {j} of {:?}", av.shape()));
        }
        let out: Vec<S> = av.data().iter().skip(j).step_by(n).copied().collect();
        let m = out.len();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::raw(vec![m, 1], out), Op::Column(a, j), rg))
    }

    /// Flat element `i` as a one-element tensor.
    pub fn select(&mut self, a: Var, i: usize) -> Result<Var> {
        let av = self.value(a);
        if i >= av.numel() {
            return Err(shape_err!("element {i} of {:?}", av.shape()));
        }
        let x = av.data()[i];
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(x), Op::Select(a, i), rg))
    }

    /// Row `r` of the output is row `index[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(shape_err!("row {bad} out of range for {:?}", av.shape()));
        }
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in &index {
            out.extend_from_slice(&av.data()[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[a]);
        let shape = vec![index.len(), n];
        Ok(self.push(Tensor::raw(shape, out), Op::GatherRows(a, index), rg))
    }

    /// Looks up rows of a `[vocab×d]` table.
    pub fn embedding(&mut self, table: Var, tokens: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(shape_err!("embedding table must be a matrix, got {:?}", tv.shape()));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!(
                "token {bad} outside vocabulary of size {vocab}"
            )));
        }
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            out.extend_from_slice(&tv.data()[t * d..(t + 1) * d]);
        }
        let rg = self.rg(&[table]);
        let value = Tensor::raw(vec![tokens.len(), d], out);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                tokens: tokens.to_vec(),
            },
            rg,
        ))
    }

    /// `x / sqrt(mean(x^2) + eps) * gain` over the trailing dimension.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let d = xv.cols();
        if gv.numel() != d {
            return Err(shape_err!(
                "rmsnorm gain {:?} does not match trailing dim of {:?}",
                gv.shape(),
                xv.shape()
            ));
        }
        let eps = S::of(eps);
        let dn = S::of(d as f64);
        let mut inv_rms = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(d) {
            let ms = row.iter().map(|&v| v * v).sum::<S>() / dn;
            let r = S::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(gv.data()).map(|(&v, &g)| v * r * g));
        }
        let rg = self.rg(&[x, gain]);
        let value = Tensor::raw(xv.shape().to_vec(), out);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Softmax over the trailing dimension. `mask[i] == true` removes entry
    /// `i` (it gets probability exactly zero).
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if let Some(m) = mask {
            if m.len() != xv.numel() {
                return Err(shape_err!("mask of length {} for {:?}", m.len(), xv.shape()));
            }
        }
        let mut out = vec![S::zero(); xv.numel()];
        for (r, row) in xv.data().chunks_exact(n).enumerate() {
            let keep = |j: usize| mask.map_or(true, |m| !m[r * n + j]);
            let mut max = S::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == S::neg_infinity() {
                return Err(Error::Domain(format!("softmax row {r} is fully masked")));
            }
            let mut total = S::zero();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - max).exp();
                    out[r * n + j] = e;
                    total = total + e;
                }
            }
            for o in &mut out[r * n..(r + 1) * n] {
                *o = *o / total;
            }
        }
        let rg = self.rg(&[x]);
        let value = Tensor::raw(xv.shape().to_vec(), out);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Mean next-token cross-entropy (nats) of `[N×V]` logits against `N` targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.cols();
        if lv.rows() != targets.len() {
            return Err(shape_err!(
                "{} logit rows but {} targets",
                lv.rows(),
                targets.len()
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!("target {bad} outside vocabulary of size {v}")));
        }
        let mut probs = Vec::with_capacity(lv.numel());
        let mut total = S::zero();
        for (row, &t) in lv.data().chunks_exact(v).zip(targets) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total = total + (lse - row[t]);
            probs.extend(row.iter().map(|&x| (x - max).exp() / z));
        }
        let loss = total / S::of(targets.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Rotary encoding of `[N × heads·dh]`, one position per row.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[usize], base: f64) -> Result<Var> {
        let value = rope_apply(self.value(x), heads, positions, base)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Rope {
                x,
                heads,
                positions: positions.to_vec(),
                base,
            },
            rg,
        ))
    }

    /// Causal multi-head attention over `N = B·seq_len` rows.
    ///
    /// `q` is `[N × heads_q·dh]`, `k` and `v` are `[N × heads_kv·dh]`; query
    /// head `h` reads key/value head `h / (heads_q / heads_kv)`. Scores are
    /// scaled by `1/sqrt(dh)` and soft-maxed with max subtraction.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads_q: usize, heads_kv: usize, seq_len: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if heads_q == 0 || heads_kv == 0 || heads_q % heads_kv != 0 {
            return Err(Error::Config(format!(
                "{heads_q} query heads do not group over {heads_kv} key/value heads"
            )));
        }
        let n = qv.rows();
        if seq_len == 0 || n % seq_len != 0 || kv.rows() != n || vv.rows() != n {
            return Err(shape_err!(
                "attention rows q={} k={} v={} with seq_len {seq_len}",
                n,
                kv.rows(),
                vv.rows()
            ));
        }
        let qs = qv.cols();
        let ks = kv.cols();
        if qs % heads_q != 0 || ks % heads_kv != 0 || qs / heads_q != ks / heads_kv || kv.shape() != vv.shape() {
            return Err(shape_err!(
                "attention head split q={:?} k={:?} v={:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            ));
        }
        let dh = qs / heads_q;
        let n_rep = heads_q / heads_kv;
        let t = seq_len;
        let batches = n / t;
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![S::zero(); batches * heads_q * t * t];
        let mut out = vec![S::zero(); n * qs];
        for b in 0..batches {
            for h in 0..heads_q {
                let kvh = h / n_rep;
                let p = &mut probs[(b * heads_q + h) * t * t..][..t * t];
                let qm = MatRef { data: qv.data(), offset: b * t * qs + h * dh, rows: t, cols: dh, rs: qs, cs: 1 };
                let km = MatRef { data: kv.data(), offset: b * t * ks + kvh * dh, rows: t, cols: dh, rs: ks, cs: 1 };
                let vm = MatRef { data: vv.data(), offset: b * t * ks + kvh * dh, rows: t, cols: dh, rs: ks, cs: 1 };
                gemm(scale, qm, km.t(), S::zero(), MatMut::dense(p, t, t));
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    let max = row[..=i].iter().copied().fold(S::neg_infinity(), S::max);
                    let mut total = S::zero();
                    for x in &mut row[..=i] {
                        *x = (*x - max).exp();
                        total = total + *x;
                    }
                    for x in &mut row[..=i] {
                        *x = *x / total;
                    }
                    for x in &mut row[i + 1..] {
                        *x = S::zero();
                    }
                }
                let om = MatMut { data: &mut out, offset: b * t * qs + h * dh, rows: t, cols: dh, rs: qs, cs: 1 };
                gemm(S::one(), MatRef::dense(p, t, t), vm, S::zero(), om);
            }
        }
        let rg = self.rg(&[q, k, v]);
        let value = Tensor::raw(vec![n, qs], out);
        Ok(self.push(
            value,
            Op::Attention { q, k, v, heads_q, heads_kv, seq_len, probs },
            rg,
        ))
    }

    /// Attention probabilities recorded by a `causal_attention` node, laid out
    /// `[batch][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[S]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Back-propagates from a one-element `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", lv.shape()));
        }
        lv.ensure_finite("loss")?;
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[i];
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[i].value;
        // Returns the gradient buffer of `v`, or None when `v` needs no gradient.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let len = nodes[v.0].value.numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); len]).as_mut_slice())
                } else {
                    None
                }
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(s) = slot!(*a) {
                    s.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
                if let Some(s) = slot!(*b) {
                    s.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = slot!(*a) {
                    s.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
                if let Some(s) = slot!(*b) {
                    s.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if let Some(s) = slot!(*a) {
                    for ((x, &gy), &o) in s.iter_mut().zip(g).zip(bv) {
                        *x = *x + gy * o;
                    }
                }
                if let Some(s) = slot!(*b) {
                    for ((x, &gy), &o) in s.iter_mut().zip(g).zip(av) {
                        *x = *x + gy * o;
                    }
                }
            }
            Op::AddRow(a, b) => {
                let n = val(*b).numel();
                if let Some(s) = slot!(*a) {
                    s.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
                if let Some(s) = slot!(*b) {
                    for row in g.chunks_exact(n) {
                        s.iter_mut().zip(row).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (val(*a).data(), val(*r).data());
                let n = rv.len();
                if let Some(s) = slot!(*a) {
                    for (srow, grow) in s.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        for j in 0..n {
                            srow[j] = srow[j] + grow[j] * rv[j];
                        }
                    }
                }
                if let Some(s) = slot!(*r) {
                    for (arow, grow) in av.chunks_exact(n).zip(g.chunks_exact(n)) {
                        for j in 0..n {
                            s[j] = s[j] + grow[j] * arow[j];
                        }
                    }
                }
            }
            Op::Scale(a, k) => {
                let kv = val(*k).item();
                let av = val(*a).data();
                if let Some(s) = slot!(*a) {
                    s.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * kv);
                }
                if let Some(s) = slot!(*k) {
                    let dot: S = g.iter().zip(av).map(|(&x, &y)| x * y).sum();
                    s[0] = s[0] + dot;
                }
            }
            Op::ScaleRows(a, c) => {
                let (av, cv) = (val(*a).data(), val(*c).data());
                let n = val(*a).cols();
                if let Some(s) = slot!(*a) {
                    for ((srow, grow), &k) in s.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(cv) {
                        srow.iter_mut().zip(grow).for_each(|(x, &y)| *x = *x + y * k);
                    }
                }
                if let Some(s) = slot!(*c) {
                    for ((x, grow), arow) in s.iter_mut().zip(g.chunks_exact(n)).zip(av.chunks_exact(n)) {
                        *x = *x + grow.iter().zip(arow).map(|(&p, &q)| p * q).sum::<S>();
                    }
                }
            }
            Op::OneMinus(a) => {
                if let Some(s) = slot!(*a) {
                    s.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let gm = MatRef::dense(g, m, n);
                if let Some(s) = slot!(*a) {
                    gemm(S::one(), gm, MatRef::dense(bv.data(), k, n).t(), S::one(), MatMut::dense(s, m, k));
                }
                if let Some(s) = slot!(*b) {
                    gemm(S::one(), MatRef::dense(av.data(), m, k).t(), gm, S::one(), MatMut::dense(s, k, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                if let Some(s) = slot!(*a) {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] = s[i * n + j] + g[j * m + i];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let o = out.data();
                if let Some(s) = slot!(*a) {
                    for ((x, &gy), &y) in s.iter_mut().zip(g).zip(o) {
                        *x = *x + gy * y * (S::one() - y);
                    }
                }
            }
            Op::Silu { a, sig } => {
                let av = val(*a).data();
                if let Some(s) = slot!(*a) {
                    for (((x, &gy), &z), &sg) in s.iter_mut().zip(g).zip(av).zip(sig) {
                        *x = *x + gy * (sg + z * sg * (S::one() - sg));
                    }
                }
            }
            Op::Exp(a) => {
                let o = out.data();
                if let Some(s) = slot!(*a) {
                    for ((x, &gy), &y) in s.iter_mut().zip(g).zip(o) {
                        *x = *x + gy * y;
                    }
                }
            }
            Op::Log(a) => {
                let av = val(*a).data();
                if let Some(s) = slot!(*a) {
                    for ((x, &gy), &z) in s.iter_mut().zip(g).zip(av) {
                        *x = *x + gy / z;
                    }
                }
            }
            Op::Softplus(a) => {
                let av = val(*a).data();
                if let Some(s) = slot!(*a) {
                    for ((x, &gy), &z) in s.iter_mut().zip(g).zip(av) {
                        *x = *x + gy * sigmoid(z);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(s) = slot!(*a) {
                    s.iter_mut().for_each(|x| *x = *x + g[0]);
                }
            }
            Op::Mean(a) => {
                let k = g[0] / S::of(val(*a).numel() as f64);
                if let Some(s) = slot!(*a) {
                    s.iter_mut().for_each(|x| *x = *x + k);
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = slot!(*a) {
                    s.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (val(*a).cols(), val(*b).cols());
                if let Some(s) = slot!(*a) {
                    for (srow, grow) in s.chunks_exact_mut(p).zip(g.chunks_exact(p + q)) {
                        srow.iter_mut().zip(&grow[..p]).for_each(|(x, &y)| *x = *x + y);
                    }
                }
                if let Some(s) = slot!(*b) {
                    for (srow, grow) in s.chunks_exact_mut(q).zip(g.chunks_exact(p + q)) {
                        srow.iter_mut().zip(&grow[p..]).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::Column(a, j) => {
                let n = val(*a).cols();
                if let Some(s) = slot!(*a) {
                    for (r, &y) in g.iter().enumerate() {
                        s[r * n + j] = s[r * n + j] + y;
                    }
                }
            }
            Op::Select(a, j) => {
                if let Some(s) = slot!(*a) {
                    s[*j] = s[*j] + g[0];
                }
            }
            Op::GatherRows(a, index) => {
                let n = val(*a).cols();
                if let Some(s) = slot!(*a) {
                    for (r, &src) in index.iter().enumerate() {
                        for j in 0..n {
                            s[src * n + j] = s[src * n + j] + g[r * n + j];
                        }
                    }
                }
            }
            Op::Embedding { table, tokens } => {
                let d = val(*table).cols();
                if let Some(s) = slot!(*table) {
                    for (r, &tok) in tokens.iter().enumerate() {
                        for j in 0..d {
                            s[tok * d + j] = s[tok * d + j] + g[r * d + j];
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (val(*x).data(), val(*gain).data());
                let d = gv.len();
                let dn = S::of(d as f64);
                if let Some(s) = slot!(*x) {
                    for (r, (srow, (grow, xrow))) in s
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d).zip(xv.chunks_exact(d)))
                        .enumerate()
                    {
                        let ir = inv_rms[r];
                        let dot: S = (0..d).map(|j| grow[j] * gv[j] * xrow[j]).sum();
                        let c = ir * ir * ir * dot / dn;
                        for j in 0..d {
                            srow[j] = srow[j] + grow[j] * gv[j] * ir - xrow[j] * c;
                        }
                    }
                }
                if let Some(s) = slot!(*gain) {
                    for (r, (grow, xrow)) in g.chunks_exact(d).zip(xv.chunks_exact(d)).enumerate() {
                        let ir = inv_rms[r];
                        for j in 0..d {
                            s[j] = s[j] + grow[j] * xrow[j] * ir;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let p = out.data();
                let n = out.cols();
                if let Some(s) = slot!(*x) {
                    for ((srow, grow), prow) in s.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(p.chunks_exact(n)) {
                        let dot: S = grow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            srow[j] = srow[j] + prow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = val(*logits).cols();
                let k = g[0] / S::of(targets.len() as f64);
                if let Some(s) = slot!(*logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { S::one() } else { S::zero() };
                            s[r * v + j] = s[r * v + j] + k * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::Rope { x, heads, positions, base } => {
                let cols = val(*x).cols();
                if let Some(s) = slot!(*x) {
                    let mut back = g.to_vec();
                    rotate(&mut back, cols, *heads, positions, *base, -1.0);
                    s.iter_mut().zip(&back).for_each(|(a, &b)| *a = *a + b);
                }
            }
            Op::Attention { q, k, v, heads_q, heads_kv, seq_len, probs } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (qs, ks) = (qv.cols(), kv.cols());
                let dh = qs / heads_q;
                let n_rep = heads_q / heads_kv;
                let t = *seq_len;
                let batches = qv.rows() / t;
                let scale = S::of(1.0 / (dh as f64).sqrt());
                let mut dq = vec![S::zero(); qv.numel()];
                let mut dk = vec![S::zero(); kv.numel()];
                let mut dv = vec![S::zero(); vv.numel()];
                let mut dp = vec![S::zero(); t * t];
                for b in 0..batches {
                    for h in 0..*heads_q {
                        let kvh = h / n_rep;
                        let qo = b * t * qs + h * dh;
                        let ko = b * t * ks + kvh * dh;
                        let p = &probs[(b * heads_q + h) * t * t..][..t * t];
                        let gm = MatRef { data: g, offset: qo, rows: t, cols: dh, rs: qs, cs: 1 };
                        let km = MatRef { data: kv.data(), offset: ko, rows: t, cols: dh, rs: ks, cs: 1 };
                        let vm = MatRef { data: vv.data(), offset: ko, rows: t, cols: dh, rs: ks, cs: 1 };
                        let qm = MatRef { data: qv.data(), offset: qo, rows: t, cols: dh, rs: qs, cs: 1 };
                        gemm(S::one(), gm, vm.t(), S::zero(), MatMut::dense(&mut dp, t, t));
                        let pm = MatRef::dense(p, t, t);
                        gemm(S::one(), pm.t(), gm, S::one(), MatMut { data: &mut dv, offset: ko, rows: t, cols: dh, rs: ks, cs: 1 });
                        for i in 0..t {
                            let prow = &p[i * t..(i + 1) * t];
                            let drow = &mut dp[i * t..(i + 1) * t];
                            let dot: S = prow[..=i].iter().zip(&drow[..=i]).map(|(&a, &b)| a * b).sum();
                            for j in 0..t {
                                drow[j] = prow[j] * (drow[j] - dot);
                            }
                        }
                        let ds = MatRef::dense(&dp, t, t);
                        gemm(scale, ds, km, S::one(), MatMut { data: &mut dq, offset: qo, rows: t, cols: dh, rs: qs, cs: 1 });
                        gemm(scale, ds.t(), qm, S::one(), MatMut { data: &mut dk, offset: ko, rows: t, cols: dh, rs: ks, cs: 1 });
                    }
                }
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(s) = slot!(var) {
                        s.iter_mut().zip(&d).for_each(|(a, &b)| *a = *a + b);
                    }
                }
            }
        }
    }
}
