use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use dualpath::checkpoint;
use dualpath::pipeline::{train_to_dir, RunOptions};
use dualpath::train::evaluate;
use dualpath::{synthetic_corpus, AblationSpec, Corpus, Error, ForwardOptions, Model, Result, RunConfig};

pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

/// Loads a checkpoint's weights in their stored precision.
pub fn load_model(dir: &Path) -> Result<AnyModel> {
    let m = checkpoint::read_manifest(dir)?;
    Ok(match m.dtype.as_str() {
        "f64" => AnyModel::F64(checkpoint::load(dir)?.model),
        _ => AnyModel::F32(checkpoint::load(dir)?.model),
    })
}

macro_rules! with_model {
    ($m:expr, $v:ident => $body:expr) => {
        match $m {
            $crate::run::AnyModel::F32($v) => $body,
            $crate::run::AnyModel::F64($v) => $body,
        }
    };
}
pub(crate) use with_model;

impl AnyModel {
    pub fn max_seq_len(&self) -> usize {
        with_model!(self, m => m.config.backbone.max_seq_len)
    }
}

fn load_corpus(path: &Path, max_bytes: Option<usize>) -> Result<Corpus> {
    let c = Corpus::load(path)?;
    Ok(match max_bytes {
        Some(n) => c.truncated(n),
        None => c,
    })
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run config with [model], [train] and optional [budget] sections;
    /// the desk config when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Byte corpus; the last `holdout_fraction` is held out for evaluation.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Stop after this many steps (the schedule still spans total_steps).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Continue from <out>/checkpoint if present.
    #[arg(long)]
    pub resume: bool,
    /// Print progress every this many steps; 0 is silent.
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
    /// Print the resolved config as TOML and exit.
    #[arg(long)]
    pub print_config: bool,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let rc = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if a.print_config {
        return crate::emit(None, &rc.to_toml()?);
    }
    let corpus = Corpus::load(&a.corpus)?;
    let opts = RunOptions { until: a.steps, resume: a.resume };
    let every = a.log_every;
    let result = train_to_dir(&a.out, &rc, &corpus, &opts, |log| {
        if every > 0 && (log.step % every == 0 || log.step + 1 == rc.train.total_steps) {
            eprintln!("step {:>6}  lr {:.3e}  loss {:.4}  |g| {:.3}", log.step, log.lr, log.loss_nats, log.grad_norm);
        }
    });
    match result {
        Ok(summary) => crate::emit(None, &(serde_json::to_string_pretty(&summary)? + "\n")),
        Err(e @ Error::Training { .. }) => {
            eprintln!("last good checkpoint kept in {}", a.out.join(dualpath::pipeline::CHECKPOINT_DIR).display());
            Err(e)
        }
        Err(e) => Err(e),
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Window length; defaults to the model's T_max.
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Score only the first this many bytes.
    #[arg(long)]
    pub max_bytes: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus, a.max_bytes)?;
    let seq_len = a.seq_len.unwrap_or_else(|| model.max_seq_len());
    let report = with_model!(&model, m => evaluate(m, &corpus, seq_len, a.batch, &ForwardOptions::default())?);
    crate::emit(a.out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblateEmit {
    Json,
    Csv,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Repeatable: `force-loops:6`, `gates:1,0`, `gates:_,0@0,1`,
    /// `shuffle:seed=7`, `baseline`. The baseline row is always reported.
    #[arg(long, required = true)]
    pub spec: Vec<AblationSpec>,
    #[arg(long, value_enum, default_value_t = AblateEmit::Json)]
    pub emit: AblateEmit,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long)]
    pub max_bytes: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus, a.max_bytes)?;
    let seq_len = a.seq_len.unwrap_or_else(|| model.max_seq_len());
    let mut specs = a.spec.clone();
    if !specs.contains(&AblationSpec::Baseline) {
        specs.insert(0, AblationSpec::Baseline);
    }
    let rows = with_model!(&model, m => dualpath::run_ablations(m, &corpus, seq_len, a.batch, &specs)?);
    let text = match a.emit {
        AblateEmit::Json => serde_json::to_string_pretty(&rows)? + "\n",
        AblateEmit::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| Error::Format(e.to_string());
            w.write_record(["spec", "loss", "delta", "tokens", "corpus", "notes"]).map_err(csv_err)?;
            for r in &rows {
                let row = [r.spec.clone(), r.loss.to_string(), r.delta.to_string(), r.tokens.to_string(), r.corpus.clone(), r.notes.join("; ")];
                w.write_record(&row).map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?
        }
    };
    crate::emit(a.out.as_deref(), &text)
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Minimum corpus size in bytes.
    #[arg(long, default_value_t = 1 << 20)]
    pub bytes: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    let bytes = synthetic_corpus(a.seed, a.bytes);
    std::fs::write(&a.out, &bytes).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    eprintln!("wrote {} bytes to {}", bytes.len(), a.out.display());
    Ok(())
}
