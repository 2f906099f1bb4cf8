//! Python bindings: data simulation, mixture fitting, neighbour graphs, label
//! operations and whole training runs.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use clsdf::asc_sim::{generate_class_sample, SimConfig};
use clsdf::divide::fit_gmm as fit_gmm_rs;
use clsdf::features::knn_graph as knn_graph_rs;
use clsdf::harness::{self, ExperimentConfig, HarnessError};
use clsdf::ssl;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn harness_err(e: HarnessError) -> PyErr {
    match e {
        HarnessError::Config(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Experiment configuration; defaults describe the desk benchmark.
#[pyclass(name = "ExperimentConfig", from_py_object)]
#[derive(Clone)]
struct PyExperimentConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyExperimentConfig {
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(text) => ExperimentConfig::from_toml(text).map_err(harness_err)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn set_seed(&mut self, seed: u64) {
        self.inner.set_seed(seed);
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(harness_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.train.schedule.total_epochs
    }

    #[setter]
    fn set_epochs(&mut self, epochs: usize) {
        self.inner.train.schedule.total_epochs = epochs;
    }

    #[getter]
    fn noise_rate(&self) -> f64 {
        self.inner.noise.rate
    }

    #[setter]
    fn set_noise_rate(&mut self, rate: f64) {
        self.inner.noise.rate = rate;
    }
}

/// Summary of a finished run.
#[pyclass(name = "RunReport", skip_from_py_object)]
struct PyRunReport {
    #[pyo3(get)]
    final_accuracy: f64,
    #[pyo3(get)]
    best_accuracy: f64,
    #[pyo3(get)]
    accuracy_curve: Vec<f64>,
    #[pyo3(get)]
    confusion: Vec<Vec<usize>>,
    #[pyo3(get)]
    wall_clock_secs: f64,
    toml: String,
}

#[pymethods]
impl PyRunReport {
    fn to_toml(&self) -> String {
        self.toml.clone()
    }
}

/// Trains per `config`, writing a run directory when `out` is given.
#[pyfunction]
#[pyo3(signature = (config, out=None))]
fn train(py: Python<'_>, config: &PyExperimentConfig, out: Option<PathBuf>) -> PyResult<PyRunReport> {
    let cfg = config.inner.clone();
    let trained = py
        .detach(|| harness::train(&cfg, None, out.as_deref()))
        .map_err(harness_err)?;
    let r = trained.report;
    Ok(PyRunReport {
        final_accuracy: r.final_accuracy,
        best_accuracy: r.best_accuracy,
        accuracy_curve: r.epochs.iter().map(|e| e.accuracy).collect(),
        confusion: r.confusion.clone(),
        wall_clock_secs: r.wall_clock_secs,
        toml: r.fingerprint(),
    })
}

/// Ensemble accuracy and confusion matrix of a checkpoint on the configured test split.
#[pyfunction]
fn evaluate_checkpoint(
    py: Python<'_>,
    checkpoint: PathBuf,
    config: &PyExperimentConfig,
) -> PyResult<(f64, Vec<Vec<usize>>)> {
    let cfg = config.inner.clone();
    let eval = py
        .detach(|| harness::eval_checkpoint(&checkpoint, &cfg, None))
        .map_err(harness_err)?;
    Ok((eval.accuracy, eval.confusion))
}

/// One simulated target: `(asc_rows, image_rows, label)`.
#[pyfunction]
#[pyo3(signature = (class_id, seed, image_size=None))]
fn simulate_sample(
    class_id: usize,
    seed: u64,
    image_size: Option<usize>,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f32>>, usize)> {
    let mut sim = SimConfig::default();
    if let Some(size) = image_size {
        sim.image_size = size;
    }
    let s = generate_class_sample(class_id, seed, &sim).map_err(value_err)?;
    let asc = s.asc.centers.iter().map(|c| c.to_array().to_vec()).collect();
    let image = s
        .image
        .pixels
        .chunks(s.image.width)
        .map(|r| r.to_vec())
        .collect();
    Ok((asc, image, s.true_label))
}

/// Two-component 1-D mixture: `(weights, means, variances, log_likelihood_trace)`.
#[pyfunction]
fn fit_gmm(values: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let g = fit_gmm_rs(&values).map_err(value_err)?;
    Ok((
        g.weights.to_vec(),
        g.means.to_vec(),
        g.variances.to_vec(),
        g.log_likelihood,
    ))
}

/// Indices of the `k` nearest other points of each point.
#[pyfunction]
fn knn_graph(points: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<Vec<usize>>> {
    let d = points.first().map_or(0, |p| p.len());
    if points.iter().any(|p| p.len() != d) {
        return Err(PyValueError::new_err("points must share one dimension"));
    }
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    let table = knn_graph_rs(&flat, points.len(), d, k).map_err(value_err)?;
    Ok(table.chunks(k).map(|r| r.to_vec()).collect())
}

#[pyfunction]
fn sharpen(p: Vec<f64>, temperature: f64) -> PyResult<Vec<f64>> {
    ssl::sharpen(&p, temperature).map_err(value_err)
}

/// Refined label from the observed label, its clean probability and predictions.
#[pyfunction]
fn co_refine(label: usize, prob: f64, predictions: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let rows: Vec<&[f64]> = predictions.iter().map(|r| r.as_slice()).collect();
    ssl::co_refine(label, prob, &rows).map_err(value_err)
}

/// Guessed label averaged over both branches' predictions.
#[pyfunction]
fn co_guess(own: Vec<Vec<f64>>, other: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let a: Vec<&[f64]> = own.iter().map(|r| r.as_slice()).collect();
    let b: Vec<&[f64]> = other.iter().map(|r| r.as_slice()).collect();
    ssl::co_guess(&a, &b).map_err(value_err)
}

#[pymodule]
fn clsdf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyExperimentConfig>()?;
    m.add_class::<PyRunReport>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(fit_gmm, m)?)?;
    m.add_function(wrap_pyfunction!(knn_graph, m)?)?;
    m.add_function(wrap_pyfunction!(sharpen, m)?)?;
    m.add_function(wrap_pyfunction!(co_refine, m)?)?;
    m.add_function(wrap_pyfunction!(co_guess, m)?)?;
    Ok(())
}
