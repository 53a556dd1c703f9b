//! Training runs on disk: loss curve, rolling checkpoint and held-out
//! evaluation in one output directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::block::ForwardOptions;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Scalar;
use crate::train::{evaluate, train_until, AdamW, EvalReport, Precision, StepLog, TrainConfig};

pub const LOSS_CSV: &str = "loss.csv";
pub const LOSS_HEADER: &str = "step,lr,loss_nats";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const EVAL_JSON: &str = "eval.json";
pub const CONFIG_TOML: &str = "config.toml";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Stop after this many completed steps instead of `total_steps`.
    pub until: Option<usize>,
    /// Continue from `out/checkpoint` when it exists.
    pub resume: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub eval: EvalReport,
}

/// Replaces `out/checkpoint` so that a complete checkpoint exists on disk at
/// every moment.
pub fn save_rolling<S: Scalar>(out: &Path, model: &Model<S>, c: &TrainConfig, opt: &AdamW<S>) -> Result<()> {
    let fresh = out.join("checkpoint.partial");
    let old = out.join("checkpoint.old");
    let dest = out.join(CHECKPOINT_DIR);
    for d in [&fresh, &old] {
        if d.exists() {
            fs::remove_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
    }
    checkpoint::save(&fresh, model, Some((c, opt)))?;
    if dest.exists() {
        fs::rename(&dest, &old).map_err(|e| Error::io(&dest, e))?;
    }
    fs::rename(&fresh, &dest).map_err(|e| Error::io(&fresh, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

/// Opens the loss curve for appending after `done` steps, dropping any rows
/// at or past `done` left by an interrupted run.
fn open_loss_csv(path: &Path, done: usize) -> Result<fs::File> {
    let mut kept = vec![LOSS_HEADER.to_string()];
    if done > 0 && path.exists() {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| Error::io(path, e))?;
            let step = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
            match step {
                Some(s) if s < done => kept.push(line),
                Some(_) => {}
                None => return Err(Error::Format(format!("{}: bad row {line:?}", path.display()))),
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for line in kept {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// Trains per `rc` on all but the held-out tail of `corpus`, writing
/// `config.toml`, `loss.csv`, `checkpoint/` and `eval.json` under `out`.
///
/// On a training error the last saved checkpoint is left in place and the
/// error is returned.
pub fn train_to_dir(
    out: &Path,
    rc: &RunConfig,
    corpus: &Corpus,
    opts: &RunOptions,
    progress: impl FnMut(&StepLog),
) -> Result<RunSummary> {
    match rc.train.precision {
        Precision::F32 => run::<f32>(out, rc, corpus, opts, progress),
        Precision::F64 => run::<f64>(out, rc, corpus, opts, progress),
    }
}

fn run<S: Scalar>(
    out: &Path,
    rc: &RunConfig,
    corpus: &Corpus,
    opts: &RunOptions,
    mut progress: impl FnMut(&StepLog),
) -> Result<RunSummary> {
    let config = rc.model_config()?;
    let c = &rc.train;
    if corpus.is_empty() {
        return Err(Error::Input(format!("corpus {} is empty", corpus.name)));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt = out.join(CHECKPOINT_DIR);
    let (mut model, mut opt) = if opts.resume && ckpt.exists() {
        let ck = checkpoint::load::<S>(&ckpt)?;
        let state = ck
            .train
            .ok_or_else(|| Error::Input(format!("{} has no optimizer state", ckpt.display())))?;
        if ck.model.config != config || state.config != *c {
            return Err(Error::Config(format!("{} was written by a different config", ckpt.display())));
        }
        (ck.model, state.optim)
    } else {
        let model = Model::<S>::init(config, c.seed)?;
        let opt = AdamW::new(&model.params);
        (model, opt)
    };
    let config_path = out.join(CONFIG_TOML);
    fs::write(&config_path, rc.to_toml()?).map_err(|e| Error::io(&config_path, e))?;

    let (train, heldout) = corpus.split(c.holdout_fraction);
    let heldout = heldout.truncated(c.eval_bytes);
    let until = opts.until.unwrap_or(c.total_steps).min(c.total_steps);
    let loss_path = out.join(LOSS_CSV);
    let mut loss_csv = open_loss_csv(&loss_path, opt.step)?;
    let mut last = None;
    let result = train_until(&mut model, &mut opt, c, &train, until, |log, model, opt| {
        writeln!(loss_csv, "{},{},{}", log.step, log.lr, log.loss_nats).map_err(|e| Error::io(&loss_path, e))?;
        last = Some(log.loss_nats);
        progress(log);
        if c.checkpoint_every > 0 && opt.step % c.checkpoint_every == 0 && opt.step < until {
            loss_csv.flush().map_err(|e| Error::io(&loss_path, e))?;
            save_rolling(out, model, c, opt)?;
        }
        Ok(())
    });
    loss_csv.flush().map_err(|e| Error::io(&loss_path, e))?;
    result?;
    save_rolling(out, &model, c, &opt)?;

    let eval_corpus = if heldout.is_empty() { train.truncated(c.eval_bytes) } else { heldout };
    let eval = evaluate(&model, &eval_corpus, c.seq_len, c.batch_size, &ForwardOptions::default())?;
    let eval_path = out.join(EVAL_JSON);
    fs::write(&eval_path, serde_json::to_string_pretty(&eval)?).map_err(|e| Error::io(&eval_path, e))?;
    Ok(RunSummary { steps: opt.step, final_loss: last, eval })
}
