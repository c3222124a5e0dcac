use fedrac::clustering::{optimal_clusters as select_clusters, KMeansOptions};
use fedrac::config::{ExperimentConfig, Method};
use fedrac::convergence;
use fedrac::engine::{self, ExperimentReport};
use fedrac::model::{self, ModelSpec, WeightVector};
use fedrac::resources::{self, ResourceVector, ResourceWeights};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: fedrac::Error) -> PyErr {
    if e.is_infeasible() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn flatten(rows: &[Vec<f64>], width: usize) -> PyResult<Vec<f64>> {
    if let Some(bad) = rows.iter().find(|r| r.len() != width) {
        return Err(PyValueError::new_err(format!(
            "expected rows of {width} features, got {}",
            bad.len()
        )));
    }
    Ok(rows.concat())
}

/// Min-max normalize raw `[speed, rate, memory]` rows into [0, 1].
#[pyfunction]
fn normalize_resources(rows: Vec<[f64; 3]>) -> PyResult<Vec<[f64; 3]>> {
    let vectors = rows
        .iter()
        .map(|r| ResourceVector::new(r[0], r[1], r[2]))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let out = resources::normalize_resources(&vectors).map_err(err)?;
    Ok(out.iter().map(|v| v.components()).collect())
}

/// Pick the Dunn-optimal cluster count for normalized resource rows.
///
/// Returns `(k, [(k, dunn or None)], clusters)`.
#[pyfunction]
#[pyo3(signature = (points, weights = [1.0 / 3.0; 3], seed = 42))]
#[allow(clippy::type_complexity)]
fn optimal_clusters(
    points: Vec<[f64; 3]>,
    weights: [f64; 3],
    seed: u64,
) -> PyResult<(usize, Vec<(usize, Option<f64>)>, Vec<Vec<usize>>)> {
    let w = ResourceWeights::new(weights[0], weights[1], weights[2]).map_err(err)?;
    let points = points
        .iter()
        .map(|p| resources::NormalizedResourceVector::new(p[0], p[1], p[2]))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let sel = select_clusters(&points, &w, seed, &KMeansOptions::default()).map_err(err)?;
    let curve = sel.curve.iter().map(|p| (p.k, p.dunn_index)).collect();
    Ok((sel.k, curve, sel.partition.clusters()))
}

#[pyfunction]
fn mar_parallel(kappa: f64, m: u32, slowest_budget: f64) -> f64 {
    convergence::mar_parallel(kappa, m, slowest_budget)
}

#[pyfunction]
fn mar_sequential(kappa: f64, m: u32, slowest_budget: f64) -> f64 {
    convergence::mar_sequential(kappa, m, slowest_budget)
}

/// Weighted FedAvg of flat parameter lists that share one layout.
#[pyfunction]
fn fedavg(models: Vec<PyRef<'_, Model>>, counts: Vec<usize>) -> PyResult<Model> {
    let weights: Vec<WeightVector> = models.iter().map(|m| m.weights.clone()).collect();
    Ok(Model {
        weights: engine::fedavg_aggregate(&weights, &counts).map_err(err)?,
    })
}

/// A ReLU multilayer perceptron with a softmax head.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Model {
    weights: WeightVector,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (input_dim, hidden_widths, class_count, rank = 1, compression_factor = 0.5, seed = 0))]
    fn new(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        class_count: usize,
        rank: usize,
        compression_factor: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = ModelSpec {
            input_dim,
            hidden_widths,
            class_count,
            compression_factor,
        };
        Ok(Model {
            weights: model::build_model(&spec, rank, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Model {
            weights: WeightVector::load(path).map_err(err)?,
        })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.weights.len()
    }

    #[getter]
    fn parameters(&self) -> Vec<f64> {
        self.weights.values().to_vec()
    }

    fn logits(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let flat = flatten(&x, self.weights.input_dim())?;
        let out = model::forward(&self.weights, &flat).map_err(err)?;
        Ok((0..out.rows()).map(|r| out.row(r).to_vec()).collect())
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let flat = flatten(&x, self.weights.input_dim())?;
        model::predict(&self.weights, &flat).map_err(err)
    }

    /// Cross-entropy loss and its gradient as a flat list.
    fn ce_loss_and_grad(&self, x: Vec<Vec<f64>>, y: Vec<usize>) -> PyResult<(f64, Vec<f64>)> {
        let flat = flatten(&x, self.weights.input_dim())?;
        let (loss, g) = model::ce_loss_and_grad(&self.weights, &flat, &y).map_err(err)?;
        Ok((loss, g.values().to_vec()))
    }
}

/// An experiment configuration. Construct with defaults or from TOML text.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Config {
    inner: ExperimentConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(text) => ExperimentConfig::from_toml_str(text).map_err(err)?,
            None => ExperimentConfig::default(),
        };
        Ok(Config { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn baseline(&self) -> String {
        self.inner.baseline.to_string()
    }

    #[setter]
    fn set_baseline(&mut self, name: &str) -> PyResult<()> {
        self.inner.baseline = name.parse::<Method>().map_err(err)?;
        Ok(())
    }

    #[getter]
    fn m(&self) -> Option<usize> {
        self.inner.clustering.m
    }

    #[setter]
    fn set_m(&mut self, m: Option<usize>) {
        self.inner.clustering.m = m;
    }

    #[getter]
    fn kd(&self) -> bool {
        self.inner.kd.enabled
    }

    #[setter]
    fn set_kd(&mut self, enabled: bool) {
        self.inner.kd.enabled = enabled;
    }

    /// Run the configured experiment and return its report.
    fn run(&self, py: Python<'_>) -> PyResult<Report> {
        let cfg = self.inner.clone();
        let outcome = py
            .detach(move || engine::run_experiment(&cfg))
            .map_err(err)?;
        Ok(Report {
            inner: outcome.report,
        })
    }
}

/// Metrics and per-round history of one experiment run.
#[pyclass]
struct Report {
    inner: ExperimentReport,
}

#[pymethods]
impl Report {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Report {
            inner: ExperimentReport::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn method(&self) -> String {
        self.inner.method.to_string()
    }

    #[getter]
    fn k_star(&self) -> Option<usize> {
        self.inner.k_star
    }

    #[getter]
    fn global_accuracy(&self) -> f64 {
        self.inner.global_accuracy
    }

    #[getter]
    fn global_macro_f1(&self) -> f64 {
        self.inner.global_macro_f1
    }

    #[getter]
    fn total_required_rounds(&self) -> Option<usize> {
        self.inner.total_required_rounds
    }

    /// Member ids per cluster, master first.
    #[getter]
    fn cluster_members(&self) -> Vec<Vec<String>> {
        self.inner
            .clusters
            .iter()
            .map(|c| c.members.clone())
            .collect()
    }

    #[getter]
    fn cluster_accuracies(&self) -> Vec<Option<f64>> {
        self.inner
            .clusters
            .iter()
            .map(|c| c.final_accuracy)
            .collect()
    }

    fn tables(&self) -> String {
        fedrac::report::render_tables(std::slice::from_ref(&self.inner))
    }
}

#[pymodule]
fn fedrac_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize_resources, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_clusters, m)?)?;
    m.add_function(wrap_pyfunction!(mar_parallel, m)?)?;
    m.add_function(wrap_pyfunction!(mar_sequential, m)?)?;
    m.add_function(wrap_pyfunction!(fedavg, m)?)?;
    m.add_class::<Model>()?;
    m.add_class::<Config>()?;
    m.add_class::<Report>()?;
    Ok(())
}
