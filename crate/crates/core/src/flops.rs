//! Per-token FLOP accounting, iso-FLOP FFN width solving and parameter counts.
//!
//! All FLOP figures are per token and per layer. Attention-score FLOPs
//! (which depend on sequence length) are not part of the budget.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{BlockVariant, ModelConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    #[serde(alias = "dualpath")]
    Dual,
    #[serde(rename = "loop", alias = "pureloop")]
    PureLoop,
    #[serde(rename = "wide", alias = "purewide")]
    PureWide,
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VariantKind::Dual => "dual",
            VariantKind::PureLoop => "loop",
            VariantKind::PureWide => "wide",
        })
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "dual" | "dualpath" => Ok(VariantKind::Dual),
            "loop" | "pureloop" => Ok(VariantKind::PureLoop),
            "wide" | "purewide" => Ok(VariantKind::PureWide),
            other => Err(Error::Input(format!("unknown variant {other:?}"))),
        }
    }
}

/// SwiGLU effective hidden width: `64 * ceil(floor(2*d_ffn/3) / 64)`.
pub fn h_eff(d_ffn: u64) -> u64 {
    64 * (2 * d_ffn / 3).div_ceil(64)
}

/// `4d^2 + 4d^2/n_rep`.
pub fn flops_attn(d: u64, n_rep: u64) -> u64 {
    4 * d * d + 4 * d * d / n_rep
}

/// `6 d h_eff(d_ffn)`.
pub fn flops_ffn(d: u64, d_ffn: u64) -> u64 {
    6 * d * h_eff(d_ffn)
}

/// The two-gate router, a `d -> 2` linear map.
pub fn flops_gate(d: u64) -> u64 {
    4 * d
}

/// Configured widths of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerWidths {
    pub deep: Option<u64>,
    pub wide: Option<u64>,
}

/// Per-layer FLOPs of a variant at the given widths.
pub fn layer_budget(kind: VariantKind, loops: u64, widths: LayerWidths, d: u64, n_rep: u64) -> Result<u64> {
    let attn = flops_attn(d, n_rep);
    let need = |w: Option<u64>, what: &str| {
        w.ok_or_else(|| Error::Input(format!("{kind} layer needs a {what} width")))
    };
    Ok(match kind {
        VariantKind::PureWide => attn + flops_ffn(d, need(widths.wide, "wide")?),
        VariantKind::PureLoop => loops * (attn + flops_ffn(d, need(widths.deep, "deep")?)),
        VariantKind::Dual => {
            loops * (attn + flops_ffn(d, need(widths.deep, "deep")?))
                + attn
                + flops_ffn(d, need(widths.wide, "wide")?)
                + flops_gate(d)
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetQuery {
    /// `F_M`, FLOPs per token per layer.
    pub budget: u64,
    pub variant: VariantKind,
    pub loops: u64,
    /// Share of the budget spent on the deep path (dual only).
    pub alloc_fraction: f64,
    pub d_model: u64,
    pub n_rep: u64,
}

impl BudgetQuery {
    fn validate(&self) -> Result<()> {
        if self.budget == 0 || self.d_model == 0 || self.n_rep == 0 {
            return Err(Error::Input("budget, d and n_rep must be positive".into()));
        }
        if self.loops == 0 {
            return Err(Error::Input("K must be at least 1".into()));
        }
        if self.variant == VariantKind::Dual && !(self.alloc_fraction > 0.0 && self.alloc_fraction < 1.0) {
            return Err(Error::Input(format!(
                "alloc fraction must lie in (0, 1), got {}",
                self.alloc_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSolution {
    pub variant: VariantKind,
    #[serde(rename = "K")]
    pub loops: u64,
    pub alloc_fraction: Option<f64>,
    #[serde(rename = "F_M")]
    pub budget: u64,
    /// Looped (deep) FFN width; absent for PureWide.
    pub d_ffn: Option<u64>,
    pub d_ffn_wide: Option<u64>,
    pub h_eff: Option<u64>,
    pub h_eff_wide: Option<u64>,
    pub realized_flops: u64,
    pub mismatch_abs: i64,
    pub mismatch_rel: f64,
    /// A width hit the 64 minimum.
    pub clamped: bool,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Rounding {
    Floor,
    Ceil,
}

struct Solved {
    d_ffn: u64,
    /// The 64-aligned hidden width the target was rounded to.
    hidden: u64,
    clamped: bool,
}

/// Maps an FFN FLOP target to a configured width through the hidden width.
fn width_for(target: f64, d: u64, mode: Rounding) -> Solved {
    let h_raw = target / (6 * d) as f64;
    let (h64, d_ffn) = match mode {
        Rounding::Floor => {
            let h64 = if h_raw > 0.0 { 64 * (h_raw / 64.0).floor() as u64 } else { 0 };
            (h64, 64 * (3 * h64 / 2 / 64))
        }
        Rounding::Ceil => {
            let h64 = if h_raw > 0.0 { 64 * (h_raw / 64.0).ceil() as u64 } else { 0 };
            (h64, (3 * h64 / 2).div_ceil(64) * 64)
        }
    };
    if d_ffn < 64 {
        Solved { d_ffn: 64, hidden: h64, clamped: true }
    } else {
        Solved { d_ffn, hidden: h64, clamped: false }
    }
}

/// Largest legal widths meeting the budget (floor mode), or the smallest
/// reaching it for PureWide (ceil mode).
pub fn solve_widths(q: &BudgetQuery) -> Result<BudgetSolution> {
    q.validate()?;
    let d = q.d_model;
    let attn = flops_attn(d, q.n_rep) as f64;
    let budget = q.budget as f64;
    let k = q.loops as f64;
    let mut warnings = Vec::new();
    let (deep, wide) = match q.variant {
        VariantKind::PureLoop => (Some(width_for(budget / k - attn, d, Rounding::Floor)), None),
        VariantKind::PureWide => (None, Some(width_for(budget - attn, d, Rounding::Ceil))),
        VariantKind::Dual => {
            let avail = budget - flops_gate(d) as f64;
            let a = q.alloc_fraction;
            (
                Some(width_for(a * avail / k - attn, d, Rounding::Floor)),
                Some(width_for((1.0 - a) * avail - attn, d, Rounding::Floor)),
            )
        }
    };
    let clamped = deep.iter().chain(wide.iter()).any(|s| s.clamped);
    let widths = LayerWidths {
        deep: deep.as_ref().map(|s| s.d_ffn),
        wide: wide.as_ref().map(|s| s.d_ffn),
    };
    let loops = if q.variant == VariantKind::PureWide { 1 } else { q.loops };
    let realized = layer_budget(q.variant, loops, widths, d, q.n_rep)?;
    let mismatch_abs = realized as i64 - q.budget as i64;
    let mismatch_rel = mismatch_abs as f64 / budget;
    if clamped {
        warnings.push("target below the smallest width; clamped to d_ffn = 64".to_string());
    }
    for s in deep.iter().chain(wide.iter()).filter(|s| !s.clamped) {
        if h_eff(s.d_ffn) != s.hidden {
            warnings.push(format!(
                "d_ffn = {} runs at h_eff = {}, not the solved hidden width {}",
                s.d_ffn,
                h_eff(s.d_ffn),
                s.hidden
            ));
        }
    }
    if mismatch_rel.abs() >= 0.02 {
        warnings.push(format!(
            "realized FLOPs differ from the budget by {:.2}%",
            100.0 * mismatch_rel
        ));
    }
    Ok(BudgetSolution {
        variant: q.variant,
        loops,
        alloc_fraction: (q.variant == VariantKind::Dual).then_some(q.alloc_fraction),
        budget: q.budget,
        d_ffn: widths.deep,
        d_ffn_wide: widths.wide,
        h_eff: widths.deep.map(h_eff),
        h_eff_wide: widths.wide.map(h_eff),
        realized_flops: realized,
        mismatch_abs,
        mismatch_rel,
        clamped,
        warnings,
    })
}

/// Parameter breakdown of a full model.
///
/// `total` counts the embedding, the (untied) output head and every weight
/// matrix. Norm gains, QK-norm gains, gain logits, the loop router and the
/// gate are small and reported separately in `auxiliary`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub embedding: u64,
    pub head: u64,
    pub attention: u64,
    pub ffn: u64,
    pub auxiliary: u64,
    pub total: u64,
    pub total_with_auxiliary: u64,
    /// `total_with_auxiliary` when the head shares the embedding matrix.
    pub tied_total_with_auxiliary: u64,
}

impl ParamCount {
    /// Number of stored scalars for a model built with this config.
    pub fn stored(&self, tie_embeddings: bool) -> u64 {
        if tie_embeddings {
            self.tied_total_with_auxiliary
        } else {
            self.total_with_auxiliary
        }
    }
}

pub fn param_count(config: &ModelConfig) -> ParamCount {
    let b = &config.backbone;
    let d = b.d_model as u64;
    let dh = b.head_dim() as u64;
    let kv = (b.heads_kv * b.head_dim()) as u64;
    let vocab = b.vocab as u64;
    let layers = b.layers as u64;
    let attn = 2 * d * d + 2 * d * kv;
    // attention norm, FFN norm, q and k norm gains
    let sublayer_aux = 2 * d + 2 * dh;
    let v = &config.variant;
    let mut attention = 0;
    let mut ffn = 0;
    let mut aux = 0;
    if let Some(w) = v.deep_width() {
        attention += attn;
        ffn += 3 * d * h_eff(w as u64);
        aux += sublayer_aux + v.loops() as u64 + (d + 2);
    }
    if let Some(w) = v.wide_width() {
        attention += attn;
        ffn += 3 * d * h_eff(w as u64);
        aux += sublayer_aux + 1;
    }
    if matches!(v, BlockVariant::DualPath { .. }) {
        aux += 2 * d + 2;
    }
    let embedding = vocab * d;
    let head = vocab * d;
    let attention = layers * attention;
    let ffn = layers * ffn;
    let auxiliary = layers * aux + d;
    let total = embedding + head + attention + ffn;
    ParamCount {
        embedding,
        head,
        attention,
        ffn,
        auxiliary,
        total,
        total_with_auxiliary: total + auxiliary,
        tied_total_with_auxiliary: total + auxiliary - head,
    }
}

/// Parses budgets like `80M`, `80e6`, `1.6G` or `80000000`.
pub fn parse_budget(s: &str) -> Result<u64> {
    let t = s.trim().replace('_', "").replace(',', "");
    let (num, mult) = match t.chars().last() {
        Some('k' | 'K') => (&t[..t.len() - 1], 1e3),
        Some('m' | 'M') => (&t[..t.len() - 1], 1e6),
        Some('g' | 'G') => (&t[..t.len() - 1], 1e9),
        _ => (t.as_str(), 1.0),
    };
    let v: f64 = num
        .parse()
        .map_err(|_| Error::Input(format!("cannot parse budget {s:?}")))?;
    let v = (v * mult).round();
    if !(v >= 1.0) || v > u64::MAX as f64 {
        return Err(Error::Input(format!("budget {s:?} out of range")));
    }
    Ok(v as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn query(budget: u64, variant: VariantKind, loops: u64, alpha: f64) -> BudgetQuery {
        BudgetQuery { budget, variant, loops, alloc_fraction: alpha, d_model: 768, n_rep: 1 }
    }

    #[test]
    fn h_eff_examples() {
        assert_eq!(h_eff(24576), 16384);
        assert_eq!(h_eff(11392), 7616);
        assert_eq!(h_eff(64), 64);
    }

    #[test]
    fn sublayer_flop_examples() {
        assert_eq!(flops_attn(768, 1), 4_718_592);
        assert_eq!(flops_ffn(768, 24576), 75_497_472);
        assert_eq!(flops_gate(768), 3072);
    }

    #[test]
    fn layer_budget_examples() {
        let wide = LayerWidths { deep: None, wide: Some(24576) };
        assert_eq!(layer_budget(VariantKind::PureWide, 1, wide, 768, 1).unwrap(), 80_216_064);
        let lp = LayerWidths { deep: Some(11392), wide: None };
        assert_eq!(layer_budget(VariantKind::PureLoop, 2, lp, 768, 1).unwrap(), 79_626_240);
        let dual = LayerWidths { deep: Some(1600), wide: Some(11392) };
        let f = layer_budget(VariantKind::Dual, 4, dual, 768, 1).unwrap();
        assert!((f as f64 - 80e6).abs() / 80e6 < 0.02);
        assert!(layer_budget(VariantKind::Dual, 4, lp, 768, 1).is_err());
    }

    #[test]
    fn solver_examples() {
        let s = solve_widths(&query(80_000_000, VariantKind::PureLoop, 2, 0.5)).unwrap();
        assert_eq!(s.d_ffn, Some(11392));
        let s = solve_widths(&query(80_000_000, VariantKind::Dual, 4, 0.5)).unwrap();
        assert_eq!((s.d_ffn, s.d_ffn_wide), (Some(1600), Some(11392)));
        let s = solve_widths(&query(80_000_000, VariantKind::PureWide, 1, 0.5)).unwrap();
        assert_eq!(s.d_ffn_wide, Some(24576));
        assert!(s.realized_flops >= 80_000_000);
        let s = solve_widths(&query(160_000_000, VariantKind::PureLoop, 3, 0.5)).unwrap();
        assert_eq!(s.d_ffn, Some(15744));
        let s = solve_widths(&query(80_000_000, VariantKind::Dual, 4, 0.25)).unwrap();
        assert_eq!(s.d_ffn, Some(64));
        assert!(s.clamped);
        assert!(!s.warnings.is_empty());
    }

    #[test]
    fn solver_rejects_bad_queries() {
        assert!(solve_widths(&query(80_000_000, VariantKind::Dual, 4, 1.0)).is_err());
        assert!(solve_widths(&query(0, VariantKind::PureLoop, 2, 0.5)).is_err());
        assert!(solve_widths(&query(80_000_000, VariantKind::PureLoop, 0, 0.5)).is_err());
    }

    #[test]
    fn tiny_budget_clamps_and_warns() {
        let s = solve_widths(&query(1_000, VariantKind::PureLoop, 2, 0.5)).unwrap();
        assert_eq!(s.d_ffn, Some(64));
        assert!(s.clamped && s.mismatch_rel > 0.02);
    }

    #[test]
    fn budget_parsing() {
        assert_eq!(parse_budget("80M").unwrap(), 80_000_000);
        assert_eq!(parse_budget("1.6e8").unwrap(), 160_000_000);
        assert_eq!(parse_budget("80_000_000").unwrap(), 80_000_000);
        assert!(parse_budget("eighty").is_err());
        assert!(parse_budget("-5").is_err());
    }

    #[test]
    fn variant_names() {
        assert_eq!("PureLoop".parse::<VariantKind>().unwrap(), VariantKind::PureLoop);
        assert_eq!("dual-path".parse::<VariantKind>().unwrap(), VariantKind::Dual);
        assert!("moe".parse::<VariantKind>().is_err());
    }
}
