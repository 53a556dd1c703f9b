mod common;

use common::tiny;
use dualpath::checkpoint;
use dualpath::corpus::BYTE_VOCAB;
use dualpath::model::{EMBED, HEAD};
use dualpath::train::{clip_grad_norm, decays, evaluate, train_step, train_until, StepLog};
use dualpath::{
    bits_per_byte, lr_at, synthetic_corpus, AdamW, Corpus, Error, ForwardOptions, Model, ModelConfig, ParameterStore,
    Tensor, TrainConfig,
};

fn small_cfg(total: usize) -> TrainConfig {
    TrainConfig { total_steps: total, warmup_steps: 1, batch_size: 2, seq_len: 16, ..TrainConfig::default() }
}

fn byte_model(seed: u64) -> Model<f32> {
    let mut c = tiny(2, 3);
    c.backbone.vocab = BYTE_VOCAB;
    Model::init(c, seed).unwrap()
}

fn corpus() -> Corpus {
    Corpus::new("synthetic", synthetic_corpus(4, 20_000))
}

fn quiet(_: &StepLog, _: &Model<f32>, _: &AdamW<f32>) -> dualpath::Result<()> {
    Ok(())
}

#[test]
fn schedule_examples() {
    let c = TrainConfig::reference(10_000);
    assert_eq!(lr_at(0, &c), 5e-6);
    assert_eq!(lr_at(184, &c), 5e-4);
    assert_eq!(lr_at(10_000, &c), 5e-5);
    assert!(lr_at(183, &c) < 5e-4 && lr_at(185, &c) < 5e-4);
    for s in 184..10_000 {
        assert!(lr_at(s + 1, &c) <= lr_at(s, &c));
    }
    for s in 0..184 {
        assert!(lr_at(s + 1, &c) > lr_at(s, &c));
    }
}

#[test]
fn config_invariants() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig { init_lr: 1.0, ..Default::default() },
        TrainConfig { final_lr: 1.0, ..Default::default() },
        TrainConfig { warmup_steps: 3000, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { beta2: 1.0, ..Default::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
}

#[test]
fn bits_per_byte_examples() {
    assert_eq!(bits_per_byte(std::f64::consts::LN_2, 1).unwrap(), 1.0);
    assert!((bits_per_byte(256f64.ln() * 1000.0, 1000).unwrap() - 8.0).abs() < 1e-12);
    assert_eq!(bits_per_byte(3.5, 7).unwrap(), bits_per_byte(7.0, 14).unwrap());
    assert!(bits_per_byte(1.0, 0).is_err());
}

fn scalar_store(name: &str, shape: &[usize], value: f64, grad: f64) -> ParameterStore<f64> {
    let mut s = ParameterStore::new();
    let n: usize = shape.iter().product();
    s.insert(name, Tensor::full(shape, value));
    s.iter_mut().for_each(|(_, p)| p.grad = Tensor::full(&[n], grad).reshaped(shape).unwrap());
    s
}

#[test]
fn adamw_zero_gradient_without_decay_is_a_no_op() {
    let c = TrainConfig { weight_decay: 0.0, ..Default::default() };
    let mut s = scalar_store("w", &[3, 2], 0.7, 0.0);
    let before = s.clone();
    AdamW::new(&s).update(&mut s, 1e-2, &c).unwrap();
    assert_eq!(s.value("w").unwrap(), before.value("w").unwrap());
}

#[test]
fn adamw_first_step_is_signed_lr() {
    let c = TrainConfig { weight_decay: 0.0, ..Default::default() };
    for g in [0.3, -2.0, 1e-3] {
        let mut s = scalar_store("b", &[1], 1.0, g);
        AdamW::new(&s).update(&mut s, 1e-3, &c).unwrap();
        let (b1, b2) = (c.beta1, c.beta2);
        let m = (1.0 - b1) * g / (1.0 - b1);
        let v = (1.0 - b2) * g * g / (1.0 - b2);
        let want = 1.0 - 1e-3 * m / (v.sqrt() + c.eps);
        let got = s.value("b").unwrap().item();
        assert!((got - want).abs() < 1e-15);
        assert!((got - (1.0 - 1e-3 * g.signum())).abs() < 1e-3 * 1e-4);
    }
}

#[test]
fn adamw_decay_only_touches_masked_matrices() {
    let c = TrainConfig::default();
    let lr = 1e-2;
    let mut s = ParameterStore::<f64>::new();
    s.insert("layers.0.wide.attn.w_q", Tensor::full(&[2, 2], 0.5));
    s.insert(EMBED, Tensor::full(&[4, 2], 0.5));
    s.insert("final_norm.gain", Tensor::full(&[2], 0.5));
    AdamW::new(&s).update(&mut s, lr, &c).unwrap();
    assert!(s.value("layers.0.wide.attn.w_q").unwrap().data().iter().all(|&v| v == 0.5 * (1.0 - lr * c.weight_decay)));
    assert!(s.value(EMBED).unwrap().data().iter().all(|&v| v == 0.5));
    assert!(s.value("final_norm.gain").unwrap().data().iter().all(|&v| v == 0.5));
}

#[test]
fn decay_mask_covers_every_parameter() {
    let mut config = ModelConfig::desk();
    config.backbone.layers = 2;
    let model: Model<f32> = Model::init(config, 0).unwrap();
    let mut decayed = 0;
    let mut excluded = 0;
    for (name, p) in model.params.iter() {
        let shape = p.value.shape();
        if decays(name, shape) {
            decayed += 1;
            assert!(name.contains(".w_") || name.ends_with("gate.weight") || name.ends_with("loop_router.weight"), "{name}");
        } else {
            excluded += 1;
            let is_norm = name.ends_with(".gain");
            let is_scalarish = name.ends_with("gain_logits") || name.ends_with("gain_logit") || name.ends_with(".bias");
            assert!(name == EMBED || name == HEAD || is_norm || is_scalarish, "{name}");
        }
    }
    assert_eq!(decayed + excluded, model.params.len());
    assert!(!decays(EMBED, &[256, 64]) && !decays(HEAD, &[64, 256]));
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut s = scalar_store("w", &[2, 2], 0.0, 3.0);
    assert_eq!(clip_grad_norm(&mut s, 1.0), 6.0);
    assert!((s.grad_norm() - 1.0).abs() < 1e-12);
    let mut t = scalar_store("w", &[2, 2], 0.0, 0.1);
    clip_grad_norm(&mut t, 1.0);
    assert_eq!(t.grad("w").unwrap().data(), &[0.1; 4]);
}

#[test]
fn seeded_runs_are_bit_identical() {
    let cfg = small_cfg(6);
    let data = corpus();
    let run = || {
        let mut m = byte_model(3);
        let mut o = AdamW::new(&m.params);
        let log = train_until(&mut m, &mut o, &cfg, &data, 6, quiet).unwrap();
        (log, m.params)
    };
    let (la, pa) = run();
    let (lb, pb) = run();
    assert_eq!(la, lb);
    assert_eq!(pa, pb);
    let other = TrainConfig { seed: 1, ..cfg.clone() };
    let mut m = byte_model(3);
    let mut o = AdamW::new(&m.params);
    let lc = train_until(&mut m, &mut o, &other, &data, 6, quiet).unwrap();
    assert_ne!(la, lc);
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted() {
    let cfg = small_cfg(2);
    let data = corpus();
    let mut a = byte_model(5);
    let mut oa = AdamW::new(&a.params);
    let la = train_until(&mut a, &mut oa, &cfg, &data, 2, quiet).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut b = byte_model(5);
    let mut ob = AdamW::new(&b.params);
    let mut lb = train_until(&mut b, &mut ob, &cfg, &data, 1, quiet).unwrap();
    checkpoint::save(dir.path(), &b, Some((&cfg, &ob))).unwrap();
    let ck = checkpoint::load::<f32>(dir.path()).unwrap();
    let state = ck.train.unwrap();
    assert_eq!(state.optim.step, 1);
    let (mut b, mut ob) = (ck.model, state.optim);
    lb.extend(train_until(&mut b, &mut ob, &state.config, &data, 2, quiet).unwrap());
    assert_eq!(la, lb);
    assert_eq!(a.params, b.params);
    assert_eq!(oa, ob);
}

#[test]
fn non_finite_parameters_abort_with_step() {
    let cfg = small_cfg(4);
    let data = corpus();
    let mut m = byte_model(6);
    let mut o = AdamW::new(&m.params);
    train_until(&mut m, &mut o, &cfg, &data, 2, quiet).unwrap();
    m.params.value_mut("layers.0.deep.attn.w_q").unwrap().data_mut()[0] = f32::NAN;
    match train_step(&mut m, &mut o, &cfg, &data) {
        Err(Error::Training { step, .. }) => assert_eq!(step, 2),
        other => panic!("expected a training error, got {other:?}"),
    }
}

#[test]
fn desk_model_starts_uniform_and_learns() {
    let cfg = TrainConfig { total_steps: 200, ..TrainConfig::default() };
    let data = Corpus::new("synthetic", synthetic_corpus(0, 1 << 20));
    assert!(data.len() >= 1 << 20);
    let mut m: Model<f32> = Model::init(ModelConfig::desk(), 0).unwrap();
    let mut o = AdamW::new(&m.params);
    let log = train_until(&mut m, &mut o, &cfg, &data, 200, quiet).unwrap();
    let uniform = 256f64.ln();
    assert!((log[0].loss_nats - uniform).abs() / uniform < 0.05, "step 0 loss {}", log[0].loss_nats);
    assert!(log.iter().any(|s| s.loss_nats < uniform));
    assert!(log.last().unwrap().loss_nats < 0.8 * uniform);
    let (_, heldout) = data.split(0.05);
    let r = evaluate(&m, &heldout.truncated(8192), 128, 8, &ForwardOptions::default()).unwrap();
    assert!(r.bits_per_byte < 8.0);
    assert_eq!(r.tokens, 8191);
}

#[test]
fn training_past_total_is_rejected() {
    let cfg = small_cfg(2);
    let mut m = byte_model(7);
    let mut o = AdamW::new(&m.params);
    assert!(train_until(&mut m, &mut o, &cfg, &corpus(), 3, quiet).is_err());
}
