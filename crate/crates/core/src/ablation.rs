//! Inference-time interventions and their cross-entropy reports.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::block::{ForwardOptions, GateMode, GateOverride};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Scalar;
use crate::train::evaluate;

#[derive(Clone, Debug, PartialEq)]
pub enum AblationSpec {
    /// The unmodified model.
    Baseline,
    ForceLoops(usize),
    Gates(GateOverride),
    ShuffleGates { seed: u64 },
}

fn parse_gate(s: &str) -> Result<Option<f64>> {
    match s.trim() {
        "_" | "" => Ok(None),
        v => v
            .parse::<f64>()
            .map(Some)
            .map_err(|_| Error::Input(format!("gate value {v:?} is not a number"))),
    }
}

impl FromStr for AblationSpec {
    type Err = Error;

    /// `baseline`, `force-loops:6`, `gates:1,0`, `gates:_,0.5` (keep the
    /// learned deep gate), `gates:1,0@0,2` (layers 0 and 2 only),
    /// `shuffle:seed=7` or `shuffle:7`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Input(format!("unrecognized ablation spec {s:?}"));
        if s == "baseline" || s == "none" {
            return Ok(AblationSpec::Baseline);
        }
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        let spec = match kind.trim() {
            "force-loops" => {
                let k: usize = arg.trim().parse().map_err(|_| bad())?;
                AblationSpec::ForceLoops(k)
            }
            "gates" => {
                let (values, layers) = match arg.split_once('@') {
                    Some((v, l)) => {
                        let layers = l
                            .split(',')
                            .map(|x| x.trim().parse::<usize>().map_err(|_| bad()))
                            .collect::<Result<Vec<_>>>()?;
                        (v, Some(layers))
                    }
                    None => (arg, None),
                };
                let (d, w) = values.split_once(',').ok_or_else(bad)?;
                AblationSpec::Gates(GateOverride { deep: parse_gate(d)?, wide: parse_gate(w)?, layers })
            }
            "shuffle" => {
                let v = arg.trim();
                let v = v.strip_prefix("seed=").unwrap_or(v);
                AblationSpec::ShuffleGates { seed: v.parse().map_err(|_| bad())? }
            }
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn fmt_gate(g: Option<f64>) -> String {
    g.map_or_else(|| "_".to_string(), |v| v.to_string())
}

impl fmt::Display for AblationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AblationSpec::Baseline => write!(f, "baseline"),
            AblationSpec::ForceLoops(k) => write!(f, "force-loops:{k}"),
            AblationSpec::Gates(o) => {
                write!(f, "gates:{},{}", fmt_gate(o.deep), fmt_gate(o.wide))?;
                if let Some(ls) = &o.layers {
                    let ls: Vec<String> = ls.iter().map(usize::to_string).collect();
                    write!(f, "@{}", ls.join(","))?;
                }
                Ok(())
            }
            AblationSpec::ShuffleGates { seed } => write!(f, "shuffle:seed={seed}"),
        }
    }
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            AblationSpec::ForceLoops(0) => Err(Error::Input("forced loop count must be at least 1".into())),
            AblationSpec::Gates(o) => o.validate(),
            _ => Ok(()),
        }
    }

    pub fn options(&self) -> ForwardOptions {
        let mut o = ForwardOptions::default();
        match self {
            AblationSpec::Baseline => {}
            AblationSpec::ForceLoops(k) => o.force_loops = Some(*k),
            AblationSpec::Gates(g) => o.gates = GateMode::Override(g.clone()),
            AblationSpec::ShuffleGates { seed } => o.gates = GateMode::Shuffle { seed: *seed },
        }
        o
    }

    /// Conventions the result depends on, for the report.
    pub fn notes(&self, trained_loops: usize) -> Vec<String> {
        let mut n = Vec::new();
        if let AblationSpec::ForceLoops(k) = *self {
            if k != trained_loops && k > 1 {
                n.push(format!("router step index normalized by K'-1 = {}", k - 1));
            }
            if k > trained_loops {
                n.push(format!("steps {}..{k} reuse the trained gain of step {trained_loops}", trained_loops + 1));
            }
        }
        n
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub corpus: String,
    pub spec: String,
    /// Mean per-token cross-entropy in nats.
    pub loss: f64,
    /// `loss - baseline loss`.
    pub delta: f64,
    pub tokens: u64,
    pub notes: Vec<String>,
}

/// Mean teacher-forced cross-entropy (nats) of the model under `spec`.
pub fn evaluate_ce<S: Scalar>(model: &Model<S>, corpus: &Corpus, seq_len: usize, batch: usize, spec: &AblationSpec) -> Result<(f64, u64)> {
    spec.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input(format!("corpus {} is empty", corpus.name)));
    }
    let r = evaluate(model, corpus, seq_len, batch, &spec.options())?;
    Ok((r.mean_nats, r.tokens))
}

/// Evaluates the baseline once and each spec against it.
pub fn run_ablations<S: Scalar>(
    model: &Model<S>,
    corpus: &Corpus,
    seq_len: usize,
    batch: usize,
    specs: &[AblationSpec],
) -> Result<Vec<AblationReport>> {
    let (base, _) = evaluate_ce(model, corpus, seq_len, batch, &AblationSpec::Baseline)?;
    let loops = model.config.variant.loops();
    specs
        .iter()
        .map(|spec| {
            let (loss, tokens) = evaluate_ce(model, corpus, seq_len, batch, spec)?;
            Ok(AblationReport {
                corpus: corpus.name.clone(),
                spec: spec.to_string(),
                loss,
                delta: loss - base,
                tokens,
                notes: spec.notes(loops),
            })
        })
        .collect()
}

/// Greedy continuation of `prompt` by `n` tokens under an intervention.
pub fn greedy_continue<S: Scalar>(model: &Model<S>, prompt: &[usize], n: usize, opts: &ForwardOptions) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Input("greedy decoding needs a non-empty prompt".into()));
    }
    let t_max = model.config.backbone.max_seq_len;
    let mut toks = prompt.to_vec();
    for _ in 0..n {
        let ctx = &toks[toks.len().saturating_sub(t_max)..];
        let logits = model.logits(ctx, ctx.len(), opts)?;
        let v = logits.cols();
        let last = &logits.data()[(ctx.len() - 1) * v..];
        let next = last
            .iter()
            .enumerate()
            .fold((0, S::neg_infinity()), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
            .0;
        toks.push(next);
    }
    Ok(toks[prompt.len()..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        for s in ["baseline", "force-loops:6", "gates:1,0", "gates:_,0.5", "gates:1,0@0,2", "shuffle:seed=7"] {
            let spec: AblationSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert_eq!("shuffle:7".parse::<AblationSpec>().unwrap(), AblationSpec::ShuffleGates { seed: 7 });
        for bad in ["force-loops:0", "gates:2,0", "gates:_,_", "gates:1", "shuffle:x", "loops:3", "gates:a,0"] {
            assert!(bad.parse::<AblationSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn notes_flag_conventions() {
        assert!(AblationSpec::ForceLoops(4).notes(4).is_empty());
        assert_eq!(AblationSpec::ForceLoops(6).notes(4).len(), 2);
        assert_eq!(AblationSpec::ForceLoops(2).notes(4).len(), 1);
        assert!(AblationSpec::ForceLoops(1).notes(4).is_empty());
    }
}
