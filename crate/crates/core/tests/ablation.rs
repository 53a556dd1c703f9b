mod common;

use common::{random_model, random_tensor, random_tokens, tiny};
use dualpath::ablation::greedy_continue;
use dualpath::backbone::SeqLayout;
use dualpath::block::{block_forward, deep_path, wide_path};
use dualpath::model::HEAD;
use dualpath::train::{evaluate, train_until};
use dualpath::{
    evaluate_ce, run_ablations, synthetic_corpus, AblationSpec, AdamW, BlockVariant, Corpus, ForwardOptions, GateMode,
    GateOverride, Model, ModelConfig, Tape, TrainConfig,
};

fn probe_corpus(vocab: usize) -> Corpus {
    let text = synthetic_corpus(9, 1500);
    Corpus::new("probe", text.iter().map(|&b| b as usize % vocab).map(|b| b as u8).collect())
}

#[test]
fn forcing_trained_depth_is_exact() {
    let model: Model<f64> = random_model(tiny(2, 4), 1, 0.3);
    let corpus = probe_corpus(16);
    let r = run_ablations(&model, &corpus, 16, 4, &[AblationSpec::ForceLoops(4), AblationSpec::Baseline]).unwrap();
    assert_eq!(r[0].delta, 0.0);
    assert_eq!(r[1].delta, 0.0);
    assert!(r[0].notes.is_empty());
}

#[test]
fn forcing_one_loop_returns_first_state() {
    let model: Model<f64> = random_model(tiny(1, 4), 2, 0.3);
    let x = random_tensor(6, 8, 3);
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let xv = tape.constant(x);
    let opts = ForwardOptions { force_loops: Some(1), ..Default::default() };
    let out = deep_path(&mut tape, &p, &model.config, 0, xv, &SeqLayout::new(6, 6), &opts).unwrap();
    assert_eq!(out.states.len(), 1);
    assert!(out.router.is_empty());
    assert_eq!(out.h, out.states[0]);
}

#[test]
fn forcing_double_depth_is_finite() {
    let model: Model<f64> = random_model(tiny(2, 3), 4, 0.3);
    let corpus = probe_corpus(16);
    let r = run_ablations(&model, &corpus, 16, 4, &[AblationSpec::ForceLoops(6)]).unwrap();
    assert!(r[0].loss.is_finite());
    assert_eq!(r[0].notes.len(), 2);
}

#[test]
fn forced_depth_ignores_trailing_gains() {
    let model: Model<f64> = random_model(tiny(2, 4), 5, 0.3);
    let corpus = probe_corpus(16);
    let spec = AblationSpec::ForceLoops(2);
    let (base, _) = evaluate_ce(&model, &corpus, 16, 4, &spec).unwrap();
    let mut changed = model.clone();
    for l in 0..2 {
        let g = changed.params.value_mut(&format!("layers.{l}.deep.gain_logits")).unwrap();
        g.data_mut()[2] = 3.0;
        g.data_mut()[3] = -40.0;
    }
    let (after, _) = evaluate_ce(&changed, &corpus, 16, 4, &spec).unwrap();
    assert_eq!(base.to_bits(), after.to_bits());
    let (full, _) = evaluate_ce(&changed, &corpus, 16, 4, &AblationSpec::Baseline).unwrap();
    assert_ne!(full.to_bits(), base.to_bits());
}

fn block_with(model: &Model<f64>, x: &dualpath::Tensor<f64>, opts: &ForwardOptions) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let layout = SeqLayout::new(x.rows(), x.rows());
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let y = block_forward(&mut tape, &p, &model.config, 0, xv, &layout, opts, None).unwrap();
    let d = deep_path(&mut tape, &p, &model.config, 0, xv, &layout, &ForwardOptions::default()).unwrap().h;
    let w = wide_path(&mut tape, &p, &model.config, 0, xv, &layout, &ForwardOptions::default()).unwrap();
    (tape.value(y).to_f64_vec(), tape.value(d).to_f64_vec(), tape.value(w).to_f64_vec())
}

fn gates(d: Option<f64>, w: Option<f64>) -> ForwardOptions {
    ForwardOptions { gates: GateMode::Override(GateOverride::uniform(d, w)), ..Default::default() }
}

#[test]
fn gate_overrides() {
    let model: Model<f64> = random_model(tiny(1, 3), 6, 0.3);
    let x = random_tensor(5, 8, 7);
    let (y, d, _) = block_with(&model, &x, &gates(Some(1.0), Some(0.0)));
    assert_eq!(y, d);
    let (y, d, w) = block_with(&model, &x, &gates(Some(1.0), Some(1.0)));
    let open: Vec<f64> = d.iter().zip(&w).map(|(a, b)| a + b).collect();
    assert_eq!(y, open);
    let (y, d, w) = block_with(&model, &x, &gates(Some(0.5), Some(0.5)));
    let uniform: Vec<f64> = d.iter().zip(&w).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
    assert_eq!(y, uniform);
}

#[test]
fn override_matching_learned_gates_is_identity() {
    let mut model: Model<f64> = random_model(tiny(2, 3), 8, 0.3);
    for l in 0..2 {
        for n in ["weight", "bias"] {
            let t = model.params.value_mut(&format!("layers.{l}.gate.{n}")).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let corpus = probe_corpus(16);
    let uniform = AblationSpec::Gates(GateOverride::uniform(Some(0.5), Some(0.5)));
    let deep_only = AblationSpec::Gates(GateOverride::uniform(Some(0.5), None));
    let r = run_ablations(&model, &corpus, 16, 4, &[uniform, deep_only]).unwrap();
    assert_eq!(r[0].delta, 0.0);
    assert_eq!(r[1].delta, 0.0);
}

#[test]
fn per_layer_override_leaves_other_layers() {
    let model: Model<f64> = random_model(tiny(2, 2), 9, 0.3);
    let tokens = random_tokens(8, 16, 10);
    let opts = |layers| ForwardOptions {
        gates: GateMode::Override(GateOverride { deep: Some(1.0), wide: Some(0.0), layers }),
        ..Default::default()
    };
    let (_, base) = model.trace(&tokens, 8, &[0], &Default::default()).unwrap();
    let (_, one) = model.trace(&tokens, 8, &[0], &opts(Some(vec![1]))).unwrap();
    assert_eq!(base[..8], one[..8]);
    assert!(one[8..].iter().all(|r| r.g_d == 1.0 && r.g_w == 0.0));
}

#[test]
fn shuffle_of_single_tokens_is_baseline() {
    let model: Model<f64> = random_model(tiny(3, 2), 11, 0.3);
    let tokens = random_tokens(9, 16, 12);
    let base = model.logits(&tokens, 1, &Default::default()).unwrap();
    let shuffled = model.logits(&tokens, 1, &ForwardOptions { gates: GateMode::Shuffle { seed: 3 }, ..Default::default() }).unwrap();
    assert_eq!(base, shuffled);
}

#[test]
fn shuffle_keeps_layer_zero_gate_multisets() {
    let model: Model<f64> = random_model(tiny(2, 2), 13, 0.5);
    let tokens = random_tokens(24, 16, 14);
    let ids = [0, 1, 2];
    let (_, base) = model.trace(&tokens, 8, &ids, &Default::default()).unwrap();
    let shuffle = ForwardOptions { gates: GateMode::Shuffle { seed: 5 }, ..Default::default() };
    let (_, a) = model.trace(&tokens, 8, &ids, &shuffle).unwrap();
    let (_, b) = model.trace(&tokens, 8, &ids, &shuffle).unwrap();
    assert_eq!(a, b);
    for s in 0..3 {
        // Layer 0 of sequence s: records s*16 .. s*16+8.
        let pairs = |recs: &[dualpath::RoutingRecord]| {
            let mut v: Vec<_> = recs[s * 16..s * 16 + 8].iter().map(|r| (r.g_d.to_bits(), r.g_w.to_bits())).collect();
            v.sort_unstable();
            v
        };
        assert_eq!(pairs(&base), pairs(&a));
    }
    let other = ForwardOptions { gates: GateMode::Shuffle { seed: 6 }, ..Default::default() };
    let (_, c) = model.trace(&tokens, 8, &ids, &other).unwrap();
    assert_ne!(a, c);
}

#[test]
fn uniform_logits_give_log_vocab() {
    let config = ModelConfig::new(common::backbone(1, 8, 2, 256), common::dual_variant(2)).unwrap();
    let mut model: Model<f64> = random_model(config, 15, 0.3);
    model.params.value_mut(HEAD).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let corpus = Corpus::new("text", synthetic_corpus(1, 500));
    let (loss, tokens) = evaluate_ce(&model, &corpus, 32, 4, &AblationSpec::Baseline).unwrap();
    assert_eq!(tokens as usize, corpus.len() - 1);
    assert!((loss - 256f64.ln()).abs() < 1e-12);
}

#[test]
fn baseline_ablation_matches_direct_evaluation() {
    let model: Model<f32> = random_model(tiny(2, 3), 16, 0.3);
    let corpus = probe_corpus(16);
    let (loss, _) = evaluate_ce(&model, &corpus, 16, 4, &AblationSpec::Baseline).unwrap();
    let direct = evaluate(&model, &corpus, 16, 4, &ForwardOptions::default()).unwrap();
    assert_eq!(loss.to_bits(), direct.mean_nats.to_bits());
}

#[test]
fn bad_specs_and_corpora_are_rejected() {
    let model: Model<f64> = random_model(tiny(1, 2), 17, 0.3);
    let corpus = probe_corpus(16);
    assert!(evaluate_ce(&model, &corpus, 16, 4, &AblationSpec::ForceLoops(0)).is_err());
    let bad = AblationSpec::Gates(GateOverride::uniform(Some(1.5), None));
    assert!(evaluate_ce(&model, &corpus, 16, 4, &bad).is_err());
    let empty = Corpus::new("empty", Vec::new());
    assert!(evaluate_ce(&model, &empty, 16, 4, &AblationSpec::Baseline).is_err());
}

#[test]
fn greedy_decoding_is_deterministic() {
    let model: Model<f64> = random_model(tiny(1, 2), 18, 0.5);
    let a = greedy_continue(&model, &[1, 2, 3], 40, &ForwardOptions::default()).unwrap();
    let b = greedy_continue(&model, &[1, 2, 3], 40, &ForwardOptions::default()).unwrap();
    assert_eq!(a.len(), 40);
    assert_eq!(a, b);
    assert!(a.iter().all(|&t| t < 16));
}

#[test]
fn shuffled_gates_hurt_a_trained_model() {
    let mut b = common::backbone(2, 32, 2, 256);
    b.max_seq_len = 64;
    let config = ModelConfig::new(b, BlockVariant::DualPath { loops: 2, d_ffn_deep: 64, d_ffn_wide: 128 }).unwrap();
    let cfg = TrainConfig { total_steps: 300, warmup_steps: 30, seq_len: 64, ..TrainConfig::default() };
    let corpus = Corpus::new("synthetic", synthetic_corpus(2, 200_000));
    let (train, heldout) = corpus.split(0.05);
    let heldout = heldout.truncated(4096);
    let mut model: Model<f32> = Model::init(config, 0).unwrap();
    let mut opt = AdamW::new(&model.params);
    train_until(&mut model, &mut opt, &cfg, &train, cfg.total_steps, |_, _, _| Ok(())).unwrap();
    let (base, _) = evaluate_ce(&model, &heldout, 64, 8, &AblationSpec::Baseline).unwrap();
    let shuffled: Vec<f64> = (0..10)
        .map(|seed| evaluate_ce(&model, &heldout, 64, 8, &AblationSpec::ShuffleGates { seed }).unwrap().0)
        .collect();
    let mean = shuffled.iter().sum::<f64>() / shuffled.len() as f64;
    assert!(mean >= base, "shuffled mean {mean} below baseline {base}: {shuffled:?}");
}
