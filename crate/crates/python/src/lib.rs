//! Python bindings: width solving, models, evaluation, ablations, traces and
//! training runs. Structured results come back as plain dicts and lists.

use std::path::PathBuf;

use dualpath::checkpoint;
use dualpath::flops::parse_budget;
use dualpath::pipeline::{train_to_dir, RunOptions};
use dualpath::routing::{read_trace as read_trace_dir, write_trace, TraceHeader};
use dualpath::train::{evaluate, Precision};
use dualpath::{
    param_count as count_params, run_ablations, solve_widths as solve, AblationSpec, BudgetQuery, Corpus, Error, ForwardOptions,
    Model, RoutingRecord, RunConfig, TrainConfig, VariantKind,
};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyList};
use serde::Serialize;

create_exception!(dualpath_py, TrainingError, PyException);

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Training { .. } | Error::NonFinite(_) => TrainingError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Any serializable value as the equivalent Python object.
fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| err(e.into()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn record_dict<'py>(py: Python<'py>, r: &RoutingRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("sequence_id", r.sequence_id)?;
    d.set_item("layer", r.layer)?;
    d.set_item("token_index", r.token_index)?;
    d.set_item("token_id", r.token_id)?;
    d.set_item("g_d", r.g_d)?;
    d.set_item("g_w", r.g_w)?;
    d.set_item("norm_dd", r.norm_dd)?;
    d.set_item("norm_dw", r.norm_dw)?;
    d.set_item("cos_dw", r.cos_dw)?;
    d.set_item("rho_d", r.rho_d)?;
    d.set_item("degenerate", r.degenerate)?;
    d.set_item("q", r.q_steps.clone())?;
    Ok(d)
}

fn run_config(config: Option<&str>) -> PyResult<RunConfig> {
    match config {
        Some(text) => RunConfig::parse(text).map_err(err),
        None => Ok(RunConfig::desk()),
    }
}

fn options(spec: Option<&str>) -> PyResult<ForwardOptions> {
    match spec {
        Some(s) => Ok(s.parse::<AblationSpec>().map_err(err)?.options()),
        None => Ok(ForwardOptions::default()),
    }
}

/// Solved FFN widths for a per-layer FLOP budget such as "80M".
#[pyfunction]
#[pyo3(signature = (budget, variant = "dual", k = 1, alpha = 0.5, d = 768, nrep = 1))]
fn solve_widths<'py>(
    py: Python<'py>,
    budget: &str,
    variant: &str,
    k: u64,
    alpha: f64,
    d: u64,
    nrep: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let variant: VariantKind = variant.parse().map_err(err)?;
    let q = BudgetQuery {
        budget: parse_budget(budget).map_err(err)?,
        variant,
        loops: k,
        alloc_fraction: if variant == VariantKind::Dual { alpha } else { 0.0 },
        d_model: d,
        n_rep: nrep,
    };
    to_py(py, &solve(&q).map_err(err)?)
}

/// Parameter breakdown of the model described by a run config (TOML text).
#[pyfunction]
#[pyo3(signature = (config = None))]
fn param_count<'py>(py: Python<'py>, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let c = run_config(config)?.model_config().map_err(err)?;
    to_py(py, &count_params(&c))
}

#[pyfunction]
fn deep_share(g_d: f64, g_w: f64, norm_dd: f64, norm_dw: f64) -> f64 {
    dualpath::deep_share(g_d, g_w, norm_dd, norm_dw).rho_d
}

#[pyfunction]
fn bits_per_byte(total_nats: f64, total_bytes: u64) -> PyResult<f64> {
    dualpath::bits_per_byte(total_nats, total_bytes).map_err(err)
}

/// Learning rate at `step` under the run config's `[train]` section, or the
/// reference schedule over `reference_total_steps`.
#[pyfunction]
#[pyo3(signature = (step, config = None, reference_total_steps = None))]
fn lr_at(step: usize, config: Option<&str>, reference_total_steps: Option<usize>) -> PyResult<f64> {
    let c = match reference_total_steps {
        Some(total) => TrainConfig::reference(total),
        None => run_config(config)?.train,
    };
    if step > c.total_steps {
        return Err(PyValueError::new_err(format!("step {step} is past total_steps {}", c.total_steps)));
    }
    Ok(dualpath::lr_at(step, &c))
}

#[pyfunction]
fn synthetic_corpus<'py>(py: Python<'py>, seed: u64, min_bytes: usize) -> Bound<'py, PyBytes> {
    PyBytes::new(py, &dualpath::synthetic_corpus(seed, min_bytes))
}

/// Canonical form of an ablation spec such as "gates:1,0".
#[pyfunction]
fn parse_ablation(spec: &str) -> PyResult<String> {
    Ok(spec.parse::<AblationSpec>().map_err(err)?.to_string())
}

/// `(header, records)` of a trace directory.
#[pyfunction]
fn read_trace<'py>(py: Python<'py>, dir: PathBuf) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyList>)> {
    let (header, records) = read_trace_dir(&dir).map_err(err)?;
    let list = PyList::empty(py);
    for r in &records {
        list.append(record_dict(py, r)?)?;
    }
    Ok((to_py(py, &header)?, list))
}

/// Trains into `out_dir` (config.toml, loss.csv, checkpoint/, eval.json) and
/// returns the run summary.
#[pyfunction]
#[pyo3(signature = (out_dir, corpus_path, config = None, steps = None, resume = false))]
fn train<'py>(
    py: Python<'py>,
    out_dir: PathBuf,
    corpus_path: PathBuf,
    config: Option<&str>,
    steps: Option<usize>,
    resume: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let rc = run_config(config)?;
    let corpus = Corpus::load(&corpus_path).map_err(err)?;
    let opts = RunOptions { until: steps, resume };
    let summary = py
        .detach(|| train_to_dir(&out_dir, &rc, &corpus, &opts, |_| {}))
        .map_err(err)?;
    to_py(py, &summary)
}

enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

macro_rules! with_model {
    ($m:expr, $v:ident => $body:expr) => {
        match $m {
            AnyModel::F32($v) => $body,
            AnyModel::F64($v) => $body,
        }
    };
}

/// A dual-path (or single-path) language model over byte tokens.
#[pyclass(name = "Model", module = "dualpath_py")]
struct PyModel {
    inner: AnyModel,
}

#[pymethods]
impl PyModel {
    /// Fresh weights for a run config (TOML text; the desk config when
    /// omitted). Precision follows the config's `[train]` section.
    #[staticmethod]
    #[pyo3(signature = (config = None, seed = 0))]
    fn init(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let rc = run_config(config)?;
        let c = rc.model_config().map_err(err)?;
        let inner = match rc.train.precision {
            Precision::F32 => AnyModel::F32(Model::init(c, seed).map_err(err)?),
            Precision::F64 => AnyModel::F64(Model::init(c, seed).map_err(err)?),
        };
        Ok(PyModel { inner })
    }

    /// Loads a checkpoint directory in its stored precision.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let m = checkpoint::read_manifest(&path).map_err(err)?;
        let inner = match m.dtype.as_str() {
            "f64" => AnyModel::F64(checkpoint::load(&path).map_err(err)?.model),
            _ => AnyModel::F32(checkpoint::load(&path).map_err(err)?.model),
        };
        Ok(PyModel { inner })
    }

    /// Writes the weights (without optimizer state) as a checkpoint.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        with_model!(&self.inner, m => checkpoint::save(&path, m, None)).map_err(err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        with_model!(&self.inner, m => to_py(py, &m.config))
    }

    #[getter]
    fn dtype(&self) -> &'static str {
        match self.inner {
            AnyModel::F32(_) => "f32",
            AnyModel::F64(_) => "f64",
        }
    }

    #[getter]
    fn num_params(&self) -> usize {
        with_model!(&self.inner, m => m.params.numel())
    }

    fn param_names(&self) -> Vec<String> {
        with_model!(&self.inner, m => m.params.names().map(str::to_string).collect())
    }

    /// `(shape, flat values)` of one parameter.
    fn param(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        with_model!(&self.inner, m => {
            let t = m.params.value(name).map_err(err)?;
            Ok((t.shape().to_vec(), t.to_f64_vec()))
        })
    }

    /// `[tokens × vocab]` logits as nested lists; `tokens` holds whole
    /// sequences of `seq_len` (one sequence when omitted).
    #[pyo3(signature = (tokens, seq_len = None, spec = None))]
    fn logits(&self, tokens: Vec<usize>, seq_len: Option<usize>, spec: Option<&str>) -> PyResult<Vec<Vec<f64>>> {
        let opts = options(spec)?;
        let seq_len = seq_len.unwrap_or(tokens.len());
        with_model!(&self.inner, m => {
            let t = m.logits(&tokens, seq_len, &opts).map_err(err)?;
            Ok(t.to_f64_vec().chunks(t.cols()).map(<[f64]>::to_vec).collect())
        })
    }

    /// Teacher-forced scores over raw bytes.
    #[pyo3(signature = (data, seq_len = None, batch = 8, spec = None, name = "python"))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        data: &[u8],
        seq_len: Option<usize>,
        batch: usize,
        spec: Option<&str>,
        name: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let opts = options(spec)?;
        let corpus = Corpus::new(name, data.to_vec());
        let report = with_model!(&self.inner, m => {
            let seq_len = seq_len.unwrap_or(m.config.backbone.max_seq_len);
            py.detach(|| evaluate(m, &corpus, seq_len, batch, &opts)).map_err(err)?
        });
        to_py(py, &report)
    }

    /// One report row (spec, loss, delta, ...) per spec against the baseline.
    #[pyo3(signature = (data, specs, seq_len = None, batch = 8, name = "python"))]
    fn ablate<'py>(
        &self,
        py: Python<'py>,
        data: &[u8],
        specs: Vec<String>,
        seq_len: Option<usize>,
        batch: usize,
        name: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let specs = specs
            .iter()
            .map(|s| s.parse::<AblationSpec>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        let corpus = Corpus::new(name, data.to_vec());
        let rows = with_model!(&self.inner, m => {
            let seq_len = seq_len.unwrap_or(m.config.backbone.max_seq_len);
            py.detach(|| run_ablations(m, &corpus, seq_len, batch, &specs)).map_err(err)?
        });
        to_py(py, &rows)
    }

    /// Routing records per (sequence, layer, token), optionally written as a
    /// trace directory.
    #[pyo3(signature = (tokens, seq_len = None, spec = None, out_dir = None, corpus = "python"))]
    fn trace<'py>(
        &self,
        py: Python<'py>,
        tokens: Vec<usize>,
        seq_len: Option<usize>,
        spec: Option<&str>,
        out_dir: Option<PathBuf>,
        corpus: &str,
    ) -> PyResult<Bound<'py, PyList>> {
        let opts = options(spec)?;
        let seq_len = seq_len.unwrap_or(tokens.len());
        if seq_len == 0 || tokens.len() % seq_len != 0 {
            return Err(PyValueError::new_err(format!("{} tokens do not split into sequences of {seq_len}", tokens.len())));
        }
        let ids: Vec<u64> = (0..(tokens.len() / seq_len) as u64).collect();
        let (records, config) = with_model!(&self.inner, m => {
            (m.trace(&tokens, seq_len, &ids, &opts).map_err(err)?.1, m.config.clone())
        });
        if let Some(dir) = out_dir {
            let header = TraceHeader::new(&config, corpus, records.len()).map_err(err)?;
            write_trace(&dir, &header, &records).map_err(err)?;
        }
        let list = PyList::empty(py);
        for r in &records {
            list.append(record_dict(py, r)?)?;
        }
        Ok(list)
    }

    fn __repr__(&self) -> String {
        with_model!(&self.inner, m => format!(
            "Model(variant={}, K={}, L={}, d={}, params={}, dtype={})",
            m.config.variant.kind(),
            m.config.variant.loops(),
            m.config.layers(),
            m.config.d_model(),
            m.params.numel(),
            self.dtype()
        ))
    }
}

#[pymodule]
fn dualpath_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TrainingError", m.py().get_type::<TrainingError>())?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(solve_widths, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(deep_share, m)?)?;
    m.add_function(wrap_pyfunction!(bits_per_byte, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(parse_ablation, m)?)?;
    m.add_function(wrap_pyfunction!(read_trace, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
