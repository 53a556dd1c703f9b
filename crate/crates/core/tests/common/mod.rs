#![allow(dead_code)]

use dualpath::flops::VariantKind;
use dualpath::{BackboneConfig, BlockVariant, BudgetQuery, Model, ModelConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// One configuration row: widths and the reported parameter count in millions.
#[derive(Clone, Copy, Debug)]
pub struct Row {
    pub budget: u64,
    pub variant: VariantKind,
    pub loops: u64,
    pub alpha: f64,
    pub d_ffn: Option<u64>,
    pub d_ffn_wide: Option<u64>,
    pub params_m: f64,
}

const fn wide(budget: u64, w: u64, p: f64) -> Row {
    Row { budget, variant: VariantKind::PureWide, loops: 1, alpha: 0.0, d_ffn: None, d_ffn_wide: Some(w), params_m: p }
}

const fn lp(budget: u64, k: u64, w: u64, p: f64) -> Row {
    Row { budget, variant: VariantKind::PureLoop, loops: k, alpha: 0.0, d_ffn: Some(w), d_ffn_wide: None, params_m: p }
}

const fn dual(budget: u64, alpha: f64, k: u64, deep: u64, w: u64, p: f64) -> Row {
    Row { budget, variant: VariantKind::Dual, loops: k, alpha, d_ffn: Some(deep), d_ffn_wide: Some(w), params_m: p }
}

const M80: u64 = 80_000_000;
const M160: u64 = 160_000_000;

pub const TABLE: [Row; 26] = [
    wide(M80, 24576, 719.0),
    lp(M80, 2, 11392, 398.0),
    lp(M80, 3, 7104, 294.0),
    lp(M80, 4, 4864, 238.0),
    dual(M80, 0.25, 2, 1600, 17920, 644.0),
    dual(M80, 0.25, 3, 576, 17920, 615.0),
    dual(M80, 0.25, 4, 64, 17920, 606.0),
    dual(M80, 0.50, 2, 4864, 11392, 559.0),
    dual(M80, 0.50, 3, 2752, 11392, 511.0),
    dual(M80, 0.50, 4, 1600, 11392, 483.0),
    dual(M80, 0.75, 2, 8128, 4864, 483.0),
    dual(M80, 0.75, 3, 4864, 4864, 398.0),
    dual(M80, 0.75, 4, 3264, 4864, 360.0),
    wide(M160, 50624, 1361.0),
    lp(M160, 2, 24448, 719.0),
    lp(M160, 3, 15744, 502.0),
    lp(M160, 4, 11392, 398.0),
    dual(M160, 0.25, 2, 4864, 37440, 1200.0),
    dual(M160, 0.25, 3, 2752, 37440, 1153.0),
    dual(M160, 0.25, 4, 1600, 37440, 1125.0),
    dual(M160, 0.50, 2, 11392, 24448, 1040.0),
    dual(M160, 0.50, 3, 7104, 24448, 936.0),
    dual(M160, 0.50, 4, 4864, 24448, 880.0),
    dual(M160, 0.75, 2, 17920, 11392, 880.0),
    dual(M160, 0.75, 3, 11392, 11392, 719.0),
    dual(M160, 0.75, 4, 8128, 11392, 644.0),
];

pub fn reference_query(r: &Row) -> BudgetQuery {
    BudgetQuery { budget: r.budget, variant: r.variant, loops: r.loops, alloc_fraction: r.alpha, d_model: 768, n_rep: 1 }
}

pub fn reference_config(r: &Row) -> ModelConfig {
    let variant = match r.variant {
        VariantKind::PureWide => BlockVariant::PureWide { d_ffn_wide: r.d_ffn_wide.unwrap() as usize },
        VariantKind::PureLoop => BlockVariant::PureLoop { loops: r.loops as usize, d_ffn: r.d_ffn.unwrap() as usize },
        VariantKind::Dual => BlockVariant::DualPath {
            loops: r.loops as usize,
            d_ffn_deep: r.d_ffn.unwrap() as usize,
            d_ffn_wide: r.d_ffn_wide.unwrap() as usize,
        },
    };
    ModelConfig::new(BackboneConfig::reference(), variant).unwrap()
}

pub fn backbone(layers: usize, d: usize, heads: usize, vocab: usize) -> BackboneConfig {
    BackboneConfig {
        layers,
        d_model: d,
        heads_q: heads,
        heads_kv: heads,
        vocab,
        max_seq_len: 32,
        rope_base: 10_000.0,
        tie_embeddings: false,
    }
}

pub fn dual_variant(loops: usize) -> BlockVariant {
    BlockVariant::DualPath { loops, d_ffn_deep: 64, d_ffn_wide: 128 }
}

/// Small dual-path config: `L` layers, width 8, 2 heads, 16-token vocab.
pub fn tiny(layers: usize, loops: usize) -> ModelConfig {
    ModelConfig::new(backbone(layers, 8, 2, 16), dual_variant(loops)).unwrap()
}

pub fn tiny_with(layers: usize, variant: BlockVariant) -> ModelConfig {
    ModelConfig::new(backbone(layers, 8, 2, 16), variant).unwrap()
}

/// Adds `N(0, std)` noise to every parameter so gates, routers and gains
/// move away from their symmetric initial values.
pub fn scramble<S: dualpath::Scalar>(model: &mut Model<S>, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).unwrap();
    for (_, p) in model.params.iter_mut() {
        for x in p.value.data_mut() {
            *x = S::of(x.f64() + dist.sample(&mut rng));
        }
    }
}

/// A randomized model: init, then scrambled.
pub fn random_model<S: dualpath::Scalar>(config: ModelConfig, seed: u64, std: f64) -> Model<S> {
    let mut m = Model::init(config, seed).unwrap();
    scramble(&mut m, seed ^ 0x5eed, std);
    m
}

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 1.0).unwrap();
    let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}
