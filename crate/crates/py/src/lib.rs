//! Python bindings: loss values, matching, presets, gradient checks and the
//! experiment runner.

use std::collections::BTreeSet;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use plreg_core::autodiff::{Axis, Graph, Tensor};
use plreg_core::checks::{run_suite, SuiteOptions};
use plreg_core::eval::{cluster_accuracy as core_cluster_accuracy, hungarian as core_hungarian, CostMatrix};
use plreg_core::experiment::{self, ExperimentConfig, SeedResult, SweepAxis};
use plreg_core::{losses, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Json(_) | Error::Shape { .. } | Error::Domain { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(to_py)
}

/// Evaluates a scalar loss built on a fresh graph.
fn scalar_loss(
    inputs: Vec<Tensor>,
    f: impl FnOnce(&mut Graph, &[plreg_core::autodiff::Var]) -> plreg_core::Result<plreg_core::autodiff::Var>,
) -> PyResult<f64> {
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.into_iter().map(|t| g.constant(t)).collect();
    let out = f(&mut g, &vars).map_err(to_py)?;
    Ok(g.scalar(out))
}

#[pyclass(frozen, get_all)]
struct LossWeights {
    w_p1: f64,
    w_p2: f64,
    w_lreg: f64,
}

#[pymethods]
impl LossWeights {
    #[new]
    fn new(w_p1: f64, w_p2: f64, w_lreg: f64) -> PyResult<Self> {
        losses::LossWeights::new(w_p1, w_p2, w_lreg).map_err(to_py)?;
        Ok(Self { w_p1, w_p2, w_lreg })
    }

    fn __repr__(&self) -> String {
        format!("LossWeights(w_p1={}, w_p2={}, w_lreg={})", self.w_p1, self.w_p2, self.w_lreg)
    }
}

/// Mask entropy term of a batch of mask activations in (0, 1).
#[pyfunction]
fn loss_p2(mask: Vec<Vec<f64>>) -> PyResult<f64> {
    scalar_loss(vec![tensor(mask)?], |g, v| losses::loss_p2(g, v[0]))
}

/// L-Reg of class probabilities `yhat` (B×K) against features (B×D).
#[pyfunction]
fn loss_lreg(yhat: Vec<Vec<f64>>, features: Vec<Vec<f64>>) -> PyResult<f64> {
    scalar_loss(vec![tensor(yhat)?, tensor(features)?], |g, v| losses::loss_lreg(g, v[0], v[1]))
}

#[pyfunction]
fn cross_entropy(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    scalar_loss(vec![tensor(logits)?], |g, v| losses::loss_cross_entropy(g, v[0], &labels))
}

#[pyfunction]
fn infomax(logits: Vec<Vec<f64>>) -> PyResult<f64> {
    scalar_loss(vec![tensor(logits)?], |g, v| losses::loss_infomax(g, v[0]))
}

#[pyfunction]
#[pyo3(signature = (logits_new, logits_old, temperature=2.0))]
fn distill(logits_new: Vec<Vec<f64>>, logits_old: Vec<Vec<f64>>, temperature: f64) -> PyResult<f64> {
    scalar_loss(vec![tensor(logits_new)?, tensor(logits_old)?], |g, v| {
        losses::loss_distill(g, v[0], v[1], temperature)
    })
}

/// Row-wise softmax.
#[pyfunction]
fn softmax(logits: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let t = plreg_core::autodiff::softmax(&tensor(logits)?, Axis::Cols);
    Ok(t.data().chunks(t.cols().max(1)).map(<[f64]>::to_vec).collect())
}

/// Minimum-cost assignment of a square cost matrix: `(perm, total)`.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, f64)> {
    let m = CostMatrix::from_rows(&cost).map_err(to_py)?;
    let a = core_hungarian(&m);
    Ok((a.perm, a.total))
}

/// Clustering accuracy `(all, known, unknown)` under one global matching.
#[pyfunction]
fn cluster_accuracy(
    preds: Vec<usize>,
    truth: Vec<usize>,
    known: Vec<usize>,
    total_classes: usize,
) -> PyResult<(f64, f64, f64)> {
    let known: BTreeSet<usize> = known.into_iter().collect();
    let m = core_cluster_accuracy(&preds, &truth, &known, total_classes).map_err(to_py)?;
    Ok((m.acc_all, m.acc_known, m.acc_unknown))
}

/// `(w_p1, w_p2, w_lreg, task)` of a named preset.
#[pyfunction]
fn preset(name: &str) -> PyResult<(f64, f64, f64, String)> {
    let p = experiment::find_preset(name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown preset {name:?}")))?;
    Ok((p.w_p1, p.w_p2, p.w_lreg, p.task.to_string()))
}

#[pyfunction]
fn preset_names() -> Vec<&'static str> {
    experiment::PRESETS.iter().map(|p| p.name).collect()
}

/// Runs the gradient-check suite: `[(name, max_rel_error, passed)]`.
#[pyfunction]
#[pyo3(signature = (instances=20, seed=0))]
fn gradcheck(py: Python<'_>, instances: usize, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let opts = SuiteOptions {
        instances,
        seed,
        fault: None,
    };
    let results = py.detach(|| run_suite(&opts)).map_err(to_py)?;
    Ok(results
        .into_iter()
        .map(|r| (r.name.to_string(), r.max_rel_error, r.passed()))
        .collect())
}

/// Parsed experiment configuration.
#[pyclass(name = "ExperimentConfig", frozen)]
struct PyExperimentConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyExperimentConfig {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = experiment::parse_config_str(text).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Config with preset values and defaults filled in.
    fn resolved(&self) -> Self {
        Self {
            inner: self.inner.resolved(),
        }
    }

    /// Trains one seed without writing files; returns the headline numbers
    /// keyed by column name.
    fn run_seed(&self, py: Python<'_>, seed: u64) -> PyResult<Vec<(String, f64)>> {
        let task = self.inner.task;
        let res = py
            .detach(|| experiment::run_seed(&self.inner, seed))
            .map_err(to_py)?;
        Ok(SeedResult::summary_columns(task)
            .iter()
            .map(|c| c.to_string())
            .zip(res.summary())
            .collect())
    }

    /// Runs every seed and writes the output directory; returns its path.
    fn run(&self, py: Python<'_>) -> PyResult<String> {
        let summary = py.detach(|| experiment::run(&self.inner)).map_err(to_py)?;
        Ok(summary.output_dir.display().to_string())
    }

    /// Runs a sweep and writes `sweep.csv`: `[(value, seed or None, summary)]`.
    fn sweep(&self, py: Python<'_>, axis: &str, values: Vec<f64>) -> PyResult<Vec<(f64, Option<u64>, Vec<f64>)>> {
        let axis = SweepAxis::parse(axis).map_err(to_py)?;
        let rows = py
            .detach(|| experiment::sweep(&self.inner, axis, &values))
            .map_err(to_py)?;
        Ok(rows.into_iter().map(|r| (r.value, r.seed, r.values)).collect())
    }
}

#[pyfunction]
fn version() -> &'static str {
    experiment::VERSION
}

#[pymodule]
fn plreg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<LossWeights>()?;
    m.add_class::<PyExperimentConfig>()?;
    m.add_function(wrap_pyfunction!(loss_p2, m)?)?;
    m.add_function(wrap_pyfunction!(loss_lreg, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(infomax, m)?)?;
    m.add_function(wrap_pyfunction!(distill, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    m.add_function(wrap_pyfunction!(preset_names, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(version, m)?)?;
    Ok(())
}
