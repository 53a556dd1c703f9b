use std::fmt::Write as _;

use clap::{Args, ValueEnum};
use dualpath::flops::parse_budget;
use dualpath::{
    param_count, solve_widths, BackboneConfig, BlockVariant, BudgetQuery, BudgetSolution, Error, ModelConfig, ParamCount,
    Result, VariantKind,
};
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    Json,
    Csv,
    Table,
}

#[derive(Args, Debug)]
pub struct BudgetArgs {
    /// Per-token, per-layer FLOP budget, e.g. `80M` or `80000000`.
    #[arg(long)]
    pub budget: String,
    /// dual, loop or wide.
    #[arg(long, default_value = "dual")]
    pub variant: VariantKind,
    /// Loop count K.
    #[arg(long, default_value_t = 1)]
    pub k: u64,
    /// Deep share of the dual budget, as a fraction or a percentage (25 = 0.25).
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 768)]
    pub d: u64,
    /// Query heads per key/value head.
    #[arg(long, default_value_t = 1)]
    pub nrep: u64,
    #[arg(long, value_enum, default_value_t = Emit::Table)]
    pub emit: Emit,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    #[command(flatten)]
    pub budget: BudgetArgs,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub budget: BudgetArgs,
    /// Build the config with a tied embedding and head.
    #[arg(long)]
    pub tie: bool,
    #[arg(long, default_value_t = 16)]
    pub layers: usize,
    #[arg(long, default_value_t = 50_304)]
    pub vocab: usize,
}

impl BudgetArgs {
    pub fn query(&self) -> Result<BudgetQuery> {
        let alpha = if self.alpha > 1.0 { self.alpha / 100.0 } else { self.alpha };
        Ok(BudgetQuery {
            budget: parse_budget(&self.budget)?,
            variant: self.variant,
            loops: if self.variant == VariantKind::PureWide { 1 } else { self.k },
            alloc_fraction: if self.variant == VariantKind::Dual { alpha } else { 0.0 },
            d_model: self.d,
            n_rep: self.nrep,
        })
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(String::new, T::to_string)
}

fn solution_fields(s: &BudgetSolution) -> Vec<(&'static str, String)> {
    vec![
        ("variant", s.variant.to_string()),
        ("K", s.loops.to_string()),
        ("alloc_fraction", opt(&s.alloc_fraction)),
        ("F_M", s.budget.to_string()),
        ("d_ffn", opt(&s.d_ffn)),
        ("d_ffn_wide", opt(&s.d_ffn_wide)),
        ("h_eff", opt(&s.h_eff)),
        ("h_eff_wide", opt(&s.h_eff_wide)),
        ("realized_flops", s.realized_flops.to_string()),
        ("mismatch_abs", s.mismatch_abs.to_string()),
        ("mismatch_rel", s.mismatch_rel.to_string()),
        ("clamped", s.clamped.to_string()),
        ("warnings", s.warnings.join("; ")),
    ]
}

fn count_fields(c: &ParamCount, tie: bool) -> Vec<(&'static str, String)> {
    vec![
        ("embedding", c.embedding.to_string()),
        ("head", c.head.to_string()),
        ("attention", c.attention.to_string()),
        ("ffn", c.ffn.to_string()),
        ("auxiliary", c.auxiliary.to_string()),
        ("total", c.total.to_string()),
        ("total_with_auxiliary", c.total_with_auxiliary.to_string()),
        ("tied_total_with_auxiliary", c.tied_total_with_auxiliary.to_string()),
        ("tie_embeddings", tie.to_string()),
        ("stored", c.stored(tie).to_string()),
    ]
}

fn render(fields: &[(&str, String)], emit: Emit) -> String {
    match emit {
        Emit::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            // Writing to a Vec cannot fail.
            w.write_record(fields.iter().map(|f| f.0)).expect("in-memory csv");
            w.write_record(fields.iter().map(|f| f.1.as_str())).expect("in-memory csv");
            String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
        }
        _ => {
            let width = fields.iter().map(|f| f.0.len()).max().unwrap_or(0);
            let mut out = String::new();
            for (k, v) in fields {
                let _ = writeln!(out, "{k:<width$}  {v}");
            }
            out
        }
    }
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

pub fn solve(a: &SolveArgs) -> Result<()> {
    let s = solve_widths(&a.budget.query()?)?;
    let text = match a.budget.emit {
        Emit::Json => json(&s)?,
        e => render(&solution_fields(&s), e),
    };
    crate::emit(None, &text)
}

/// The reference backbone at width `d` with 64-wide heads.
fn backbone(a: &ParamsArgs) -> Result<BackboneConfig> {
    let d = a.budget.d as usize;
    let nrep = a.budget.nrep as usize;
    if d % 64 != 0 || (d / 64) % nrep != 0 {
        return Err(Error::Input(format!("d = {d} does not split into 64-wide heads with n_rep {nrep}")));
    }
    Ok(BackboneConfig {
        layers: a.layers,
        d_model: d,
        heads_q: d / 64,
        heads_kv: d / 64 / nrep,
        vocab: a.vocab,
        tie_embeddings: a.tie,
        ..BackboneConfig::reference()
    })
}

#[derive(Serialize)]
struct ParamsReport {
    solution: BudgetSolution,
    model: ModelConfig,
    params: ParamCount,
    stored: u64,
}

pub fn params(a: &ParamsArgs) -> Result<()> {
    let s = solve_widths(&a.budget.query()?)?;
    let width = |w: Option<u64>| w.map(|w| w as usize).ok_or_else(|| Error::Input("solver returned no width".into()));
    let variant = match s.variant {
        VariantKind::Dual => BlockVariant::DualPath {
            loops: s.loops as usize,
            d_ffn_deep: width(s.d_ffn)?,
            d_ffn_wide: width(s.d_ffn_wide)?,
        },
        VariantKind::PureLoop => BlockVariant::PureLoop { loops: s.loops as usize, d_ffn: width(s.d_ffn)? },
        VariantKind::PureWide => BlockVariant::PureWide { d_ffn_wide: width(s.d_ffn_wide)? },
    };
    let model = ModelConfig::new(backbone(a)?, variant)?;
    let count = param_count(&model);
    let text = match a.budget.emit {
        Emit::Json => json(&ParamsReport { stored: count.stored(a.tie), solution: s, model, params: count })?,
        e => {
            let mut fields = solution_fields(&s);
            fields.extend(count_fields(&count, a.tie));
            render(&fields, e)
        }
    };
    crate::emit(None, &text)
}
