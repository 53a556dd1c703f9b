//! Finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParameterStore};

/// Worst offending coordinate of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn eval<F>(store: &ParameterStore<f64>, f: &F) -> Result<(Tape<f64>, BoundParams, Var)>
where
    F: Fn(&mut Tape<f64>, &BoundParams) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Shape("checked function must return a scalar".into()));
    }
    if !v.item().is_finite() {
        return Err(Error::NonFinite("checked function value".into()));
    }
    Ok((tape, bound, out))
}

/// Compares analytic gradients with central differences at `step`.
///
/// Relative error per coordinate is
/// `|a - n| / max(|a|, |n|, 1e-8)`; the maximum over all parameters is reported.
pub fn grad_check<F>(store: &ParameterStore<f64>, step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &BoundParams) -> Result<Var>,
{
    let (mut tape, bound, out) = eval(store, &f)?;
    tape.backward(out)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = store.clone();
    for (name, var) in bound.iter() {
        let n = tape.value(var).numel();
        let analytic = tape.grad(var).map(|g| g.into_data()).unwrap_or_else(|| vec![0.0; n]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = probe.value(name)?.data()[i];
            probe.value_mut(name)?.data_mut()[i] = orig + step;
            let (tp, _, o) = eval(&probe, &f)?;
            let plus = tp.value(o).item();
            probe.value_mut(name)?.data_mut()[i] = orig - step;
            let (tm, _, o) = eval(&probe, &f)?;
            let minus = tm.value(o).item();
            probe.value_mut(name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst_param = name.to_string();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
