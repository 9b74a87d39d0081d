//! Python bindings exposing the simulator's main types and operations.
//!
//! Build with `cargo build -p dfrd-py --release` and import the produced
//! `dfrd_py` extension module; `python/smoke_test.py` at the workspace root
//! does exactly that.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use dfrd_core::config::{apply_overrides, parse_config, render_config, split_assignment};
use dfrd_core::data::dirichlet_partition_labels;
use dfrd_core::distill::{transfer_gate, GateVariant};
use dfrd_core::error::Error;
use dfrd_core::orchestrator::run_experiment;
use dfrd_core::seed::SeedNode;
use dfrd_core::tensor::Tensor;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tensor_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(to_py_err)
}

/// Stable softmax of a logits vector.
#[pyfunction]
fn softmax(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    let t = Tensor::from_vec(logits);
    Ok(dfrd_core::autodiff::softmax(&t).map_err(to_py_err)?.data().to_vec())
}

/// Mean cross-entropy of `[B,C]` logits against integer labels.
#[pyfunction]
fn cross_entropy(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    let t = tensor_from_rows(logits)?;
    dfrd_core::autodiff::cross_entropy(&t, &labels).map_err(to_py_err)
}

/// Mean KL divergence between softmax rows; the first argument supplies `P`.
#[pyfunction]
fn kl_div(p_logits: Vec<Vec<f64>>, q_logits: Vec<Vec<f64>>) -> PyResult<f64> {
    let p = tensor_from_rows(p_logits)?;
    let q = tensor_from_rows(q_logits)?;
    dfrd_core::autodiff::kl_div(&p, &q).map_err(to_py_err)
}

/// Exponential width budgets `R_i = (1/2)^min(sigma, floor(rho*i/n))`.
#[pyfunction]
fn assign_budgets(n: usize, sigma: u32, rho: u32) -> PyResult<Vec<f64>> {
    if n < 1 || sigma < 1 || rho < 1 {
        return Err(PyValueError::new_err("n, sigma and rho must be >= 1"));
    }
    Ok(dfrd_core::heterofed::assign_budgets(n, sigma, rho).fractions)
}

/// Gaussian-blob dataset; returns `(features, labels)`.
#[pyfunction]
fn make_blobs(
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let ds = dfrd_core::data::make_blobs(classes, dim, per_class, spread, seed).map_err(to_py_err)?;
    let rows = (0..ds.len()).map(|i| ds.features.row(i).to_vec()).collect();
    Ok((rows, ds.labels))
}

/// Per-class Dirichlet split of sample indices across clients.
#[pyfunction]
fn dirichlet_partition(
    labels: Vec<usize>,
    num_classes: usize,
    clients: usize,
    omega: f64,
    seed: u64,
) -> PyResult<Vec<Vec<usize>>> {
    let partition =
        dirichlet_partition_labels(&labels, num_classes, clients, omega, SeedNode::root(seed))
            .map_err(to_py_err)?;
    Ok(partition.client_indices)
}

/// Transferability gate decision for one sample.
#[pyfunction]
fn gate(global_logits: Vec<f64>, ensemble_logits: Vec<f64>, label: usize, variant: &str) -> PyResult<bool> {
    let v: GateVariant = variant.parse().map_err(to_py_err)?;
    Ok(transfer_gate(&global_logits, &ensemble_logits, label, v))
}

/// The built-in default configuration in `key=value` form.
#[pyfunction]
fn default_config() -> String {
    render_config(&dfrd_core::orchestrator::ExperimentConfig::default())
}

/// Result of one experiment run.
#[pyclass(name = "RunResult")]
struct PyRunResult {
    #[pyo3(get)]
    csv: String,
    #[pyo3(get)]
    top_round: u64,
    #[pyo3(get)]
    top_g_acc: f64,
    #[pyo3(get)]
    l_acc_at_top: f64,
    #[pyo3(get)]
    rounds: usize,
}

/// Parses a config (plus `key=value` overrides), runs it, and returns the
/// metrics with the CSV as a string. Nothing is written to disk.
#[pyfunction]
#[pyo3(signature = (config_text, overrides = vec![], seed = None))]
fn run(config_text: &str, overrides: Vec<String>, seed: Option<u64>) -> PyResult<PyRunResult> {
    let base = parse_config(config_text).map_err(to_py_err)?;
    let pairs: Result<Vec<(String, String)>, Error> =
        overrides.iter().map(|raw| split_assignment(raw)).collect();
    let mut cfg = apply_overrides(&base, &pairs.map_err(to_py_err)?).map_err(to_py_err)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let output = run_experiment(&cfg).map_err(to_py_err)?;
    Ok(PyRunResult {
        csv: output.csv(),
        top_round: output.summary.top_round,
        top_g_acc: output.summary.top_g_acc,
        l_acc_at_top: output.summary.l_acc_at_top,
        rounds: output.records.len(),
    })
}

/// Runs the fast invariant suite; returns `(name, passed)` pairs.
#[pyfunction]
fn check() -> Vec<(String, bool)> {
    dfrd_core::checks::run_checks()
        .into_iter()
        .map(|(name, outcome)| (name.to_string(), outcome.is_ok()))
        .collect()
}

#[pymodule]
fn dfrd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(kl_div, m)?)?;
    m.add_function(wrap_pyfunction!(assign_budgets, m)?)?;
    m.add_function(wrap_pyfunction!(make_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(dirichlet_partition, m)?)?;
    m.add_function(wrap_pyfunction!(gate, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    m.add_class::<PyRunResult>()?;
    Ok(())
}
