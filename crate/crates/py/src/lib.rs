//! Python bindings for the difmaml simulator.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use difmaml::cli::topology_kind;
use difmaml::config::Config as CoreConfig;
use difmaml::graph::{build_topology, metropolis_weights, mixing_rate as core_mixing_rate, validate_combination, CombinationMatrix};
use difmaml::netsim::{self, MetricsRow, Strategy};
use difmaml::probe::run_probe;
use difmaml::rng::{substream, GRAPH_STREAM};

fn to_py(e: difmaml::Error) -> PyErr {
    match e {
        difmaml::Error::Config(_) | difmaml::Error::InvalidArgument(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse_strategy(name: &str) -> PyResult<Strategy> {
    Strategy::parse(name).map_err(to_py)
}

fn row_dict<'py>(py: Python<'py>, row: &MetricsRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("iteration", row.iteration)?;
    d.set_item("strategy", row.strategy.name())?;
    d.set_item("train_loss", row.train_loss.clone())?;
    d.set_item("test_loss", row.test_loss.clone())?;
    d.set_item("mean_test_loss", row.mean_test_loss)?;
    d.set_item("agent_disagreement", row.agent_disagreement.clone())?;
    d.set_item("disagreement", row.disagreement)?;
    d.set_item("centroid_grad_norm_sq", row.centroid_grad_norm_sq)?;
    d.set_item("lambda2", row.lambda2)?;
    Ok(d)
}

/// Parsed simulation config.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: CoreConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        CoreConfig::parse(text).map(|inner| PyConfig { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        CoreConfig::load(std::path::Path::new(path))
            .map(|inner| PyConfig { inner })
            .map_err(to_py)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn strategies(&self) -> Vec<&'static str> {
        self.inner.strategies.iter().map(|s| s.name()).collect()
    }
}

/// A network of agents that advances one adapt/combine iteration per `step`.
#[pyclass(name = "Network", unsendable)]
struct PyNetwork {
    inner: netsim::Network,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (config, strategy = None))]
    fn new(config: &PyConfig, strategy: Option<&str>) -> PyResult<Self> {
        let s = match strategy {
            Some(name) => parse_strategy(name)?,
            None => config.inner.strategies[0],
        };
        let rc = config.inner.run_config(s).map_err(to_py)?;
        netsim::Network::new(rc).map(|inner| PyNetwork { inner }).map_err(to_py)
    }

    #[pyo3(signature = (n = 1))]
    fn step(&mut self, n: usize) -> PyResult<()> {
        for _ in 0..n {
            self.inner.step().map_err(to_py)?;
        }
        Ok(())
    }

    fn models(&self) -> Vec<Vec<f64>> {
        self.inner.models().iter().map(|w| w.iter().copied().collect()).collect()
    }

    fn combination(&self) -> Vec<Vec<f64>> {
        self.inner.combination().rows()
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.inner.iteration()
    }

    #[getter]
    fn lambda2(&self) -> f64 {
        self.inner.lambda2()
    }

    #[getter]
    fn agents(&self) -> usize {
        self.inner.agents().len()
    }
}

/// Trains one strategy to completion; returns `{"lambda2", "models", "rows"}`.
#[pyfunction]
#[pyo3(signature = (config, strategy = None))]
fn run<'py>(py: Python<'py>, config: &PyConfig, strategy: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let s = match strategy {
        Some(name) => parse_strategy(name)?,
        None => config.inner.strategies[0],
    };
    let rc = config.inner.run_config(s).map_err(to_py)?;
    let result = py.detach(|| netsim::run(&rc)).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("lambda2", result.lambda2)?;
    let models: Vec<Vec<f64>> = result.models.iter().map(|w| w.iter().copied().collect()).collect();
    out.set_item("models", models)?;
    let rows = result.rows.iter().map(|r| row_dict(py, r)).collect::<PyResult<Vec<_>>>()?;
    out.set_item("rows", rows)?;
    Ok(out)
}

/// Metropolis combination matrix for a generated topology.
#[pyfunction]
#[pyo3(signature = (kind, k, p = 0.5, seed = 0))]
fn combination_matrix(kind: &str, k: usize, p: f64, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let kind = topology_kind(kind, p, None).map_err(to_py)?;
    let mut rng = substream(seed, GRAPH_STREAM);
    let t = build_topology(&kind, k, Some(&mut rng)).map_err(to_py)?;
    Ok(metropolis_weights(&t).rows())
}

/// Second-largest eigenvalue magnitude of a combination matrix.
#[pyfunction]
fn mixing_rate(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    let a = CombinationMatrix::from_rows(rows).map_err(to_py)?;
    core_mixing_rate(&a).map_err(to_py)
}

/// `(nonnegative, doubly_stochastic, primitive)` for a combination matrix.
#[pyfunction]
fn validate_matrix(rows: Vec<Vec<f64>>) -> PyResult<(bool, bool, bool)> {
    let a = CombinationMatrix::from_rows(rows).map_err(to_py)?;
    let r = validate_combination(&a);
    Ok((r.nonnegative, r.doubly_stochastic, r.primitive))
}

/// Runs a named probe; returns `(passed, csv)`.
#[pyfunction]
fn probe(py: Python<'_>, name: &str, config: &PyConfig) -> PyResult<(bool, String)> {
    let rc = config.inner.run_config(config.inner.strategies[0]).map_err(to_py)?;
    let report = py.detach(|| run_probe(name, &rc)).map_err(to_py)?;
    Ok((report.passed(), report.to_csv()))
}

#[pymodule]
fn difmaml_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(combination_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(mixing_rate, m)?)?;
    m.add_function(wrap_pyfunction!(validate_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(probe, m)?)?;
    Ok(())
}
