//! Python bindings for the `pvi` engine.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIndexError, PyValueError};
use pyo3::prelude::*;

use pvi::harness::{self, RunConfig};
use pvi::localopt::{optimize_local, LocalProblem, OptimizerConfig};
use pvi::server::{self, NoMetrics, Schedule};
use pvi::{ApproxFactor, Dataset, GaussianMeanField, ModelKind, ModelSpec, NaturalParams, PviError};

fn err(e: PviError) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

/// Mean-field Gaussian in natural parameters.
#[pyclass(name = "GaussianMeanField", module = "pvi_py", skip_from_py_object)]
#[derive(Clone)]
struct PyGaussian(GaussianMeanField);

#[pymethods]
impl PyGaussian {
    #[new]
    fn new(eta1: Vec<f64>, eta2: Vec<f64>) -> PyResult<Self> {
        GaussianMeanField::new(eta1, eta2).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_mean_var(mean: Vec<f64>, var: Vec<f64>) -> PyResult<Self> {
        GaussianMeanField::from_mean_var(&mean, &var).map(Self).map_err(err)
    }

    #[staticmethod]
    fn standard_normal(dim: usize) -> Self {
        Self(GaussianMeanField::standard_normal(dim))
    }

    #[getter]
    fn eta1(&self) -> Vec<f64> {
        self.0.eta1.clone()
    }

    #[getter]
    fn eta2(&self) -> Vec<f64> {
        self.0.eta2.clone()
    }

    fn dim(&self) -> usize {
        self.0.dim()
    }

    /// `(mean, variance)` lists.
    fn mean_var(&self) -> PyResult<(Vec<f64>, Vec<f64>)> {
        self.0.mean_var().map_err(err)
    }

    fn log_partition(&self) -> PyResult<f64> {
        self.0.log_partition().map_err(err)
    }

    /// `KL(self || other)`.
    fn kl(&self, other: PyRef<'_, PyGaussian>) -> PyResult<f64> {
        self.0.kl(&other.0).map_err(err)
    }

    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        self.0.sample(n, seed).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("GaussianMeanField(eta1={:?}, eta2={:?})", self.0.eta1, self.0.eta2)
    }
}

/// Client approximate-likelihood factor; may be improper.
#[pyclass(name = "ApproxFactor", module = "pvi_py", skip_from_py_object)]
#[derive(Clone)]
struct PyFactor(ApproxFactor);

#[pymethods]
impl PyFactor {
    #[new]
    #[pyo3(signature = (eta1, eta2, owner = 0))]
    fn new(eta1: Vec<f64>, eta2: Vec<f64>, owner: usize) -> PyResult<Self> {
        ApproxFactor::new(eta1, eta2, owner).map(Self).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (dim, owner = 0))]
    fn unit(dim: usize, owner: usize) -> Self {
        Self(ApproxFactor::unit(dim, owner))
    }

    #[getter]
    fn eta1(&self) -> Vec<f64> {
        self.0.eta1.clone()
    }

    #[getter]
    fn eta2(&self) -> Vec<f64> {
        self.0.eta2.clone()
    }

    #[getter]
    fn owner(&self) -> usize {
        self.0.owner
    }

    fn __repr__(&self) -> String {
        format!(
            "ApproxFactor(eta1={:?}, eta2={:?}, owner={})",
            self.0.eta1, self.0.eta2, self.0.owner
        )
    }
}

#[pyclass(name = "Dataset", module = "pvi_py", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset(Dataset);

#[pymethods]
impl PyDataset {
    #[new]
    fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> PyResult<Self> {
        Dataset::new(inputs, targets).map(Self).map_err(err)
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.0.n_features
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "ModelSpec", module = "pvi_py", skip_from_py_object)]
#[derive(Clone)]
struct PyModel(ModelSpec);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn linear_regression(dim: usize, noise_variance: f64) -> Self {
        Self(ModelSpec::linear_regression(dim, noise_variance))
    }

    #[staticmethod]
    #[pyo3(signature = (dim, bias = true))]
    fn logistic_regression(dim: usize, bias: bool) -> Self {
        Self(ModelSpec::logistic_regression(dim, bias))
    }

    #[staticmethod]
    fn bnn_classifier(input_dim: usize, layer_widths: Vec<usize>, classes: usize) -> Self {
        Self(ModelSpec::bnn_classifier(input_dim, layer_widths, classes))
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.0.kind {
            ModelKind::LinearRegression => "linear_regression",
            ModelKind::LogisticRegression => "logistic_regression",
            ModelKind::BnnClassifier => "bnn_classifier",
        }
    }

    fn param_dim(&self) -> usize {
        self.0.param_dim()
    }
}

fn parse_optimizer(toml_text: Option<&str>) -> PyResult<OptimizerConfig> {
    match toml_text {
        None => Ok(OptimizerConfig::default()),
        Some(t) => {
            let c: OptimizerConfig = toml::from_str(t).map_err(|e| PyValueError::new_err(e.to_string()))?;
            c.validate().map_err(err)?;
            Ok(c)
        }
    }
}

/// Cavity `q / t` as an unnormalized factor.
#[pyfunction]
fn divide(q: PyRef<'_, PyGaussian>, t: PyRef<'_, PyFactor>) -> PyFactor {
    PyFactor(pvi::divide(&q.0, &t.0))
}

/// `base * prod factors`.
#[pyfunction]
fn combine(base: PyRef<'_, PyGaussian>, factors: Vec<PyRef<'_, PyFactor>>) -> PyGaussian {
    PyGaussian(pvi::combine(&base.0, factors.iter().map(|f| &f.0)))
}

/// One client update. Returns `(q_new, t_new, delta)`.
#[pyfunction]
#[pyo3(signature = (q_prev, t_prev, data, model, optimizer = None))]
fn local_update(
    q_prev: PyRef<'_, PyGaussian>,
    t_prev: PyRef<'_, PyFactor>,
    data: PyRef<'_, PyDataset>,
    model: PyRef<'_, PyModel>,
    optimizer: Option<&str>,
) -> PyResult<(PyGaussian, PyFactor, PyFactor)> {
    let config = parse_optimizer(optimizer)?;
    let problem = LocalProblem {
        q_prev: &q_prev.0,
        t_prev: &t_prev.0,
        data: &data.0,
        model: &model.0,
    };
    let out = optimize_local(&problem, &config).map_err(err)?;
    Ok((PyGaussian(out.q_new), PyFactor(out.t_new), PyFactor(out.delta)))
}

/// Run PVI over client datasets. `schedule` and `optimizer` are TOML
/// tables. Returns `(posterior, factors, trace_jsonl)`.
#[pyfunction]
#[pyo3(signature = (prior, model, clients, schedule = None, optimizer = None, seed = 0))]
fn run_pvi(
    prior: PyRef<'_, PyGaussian>,
    model: PyRef<'_, PyModel>,
    clients: Vec<PyRef<'_, PyDataset>>,
    schedule: Option<&str>,
    optimizer: Option<&str>,
    seed: u64,
) -> PyResult<(PyGaussian, Vec<PyFactor>, String)> {
    let schedule: Schedule = match schedule {
        None => Schedule::default(),
        Some(t) => toml::from_str(t).map_err(|e| PyValueError::new_err(e.to_string()))?,
    };
    let mut config = parse_optimizer(optimizer)?;
    config.seed = seed;
    let parts: Vec<Dataset> = clients.iter().map(|d| d.0.clone()).collect();
    let state = server::init_with_seed(prior.0.clone(), parts.len(), seed).map_err(err)?;
    let out = server::run(state, &schedule, &model.0, &parts, &config, &mut NoMetrics).map_err(err)?;
    let factors = out.state.factors.iter().cloned().map(PyFactor).collect();
    Ok((PyGaussian(out.state.q), factors, out.trace.to_jsonl()))
}

/// Outcome of `run_config`.
#[pyclass(name = "RunOutput", module = "pvi_py")]
struct PyRunOutput {
    #[pyo3(get)]
    method: String,
    #[pyo3(get)]
    commits: usize,
    #[pyo3(get)]
    converged: bool,
    #[pyo3(get)]
    trace_jsonl: String,
    posterior: GaussianMeanField,
}

#[pymethods]
impl PyRunOutput {
    #[getter]
    fn posterior(&self) -> PyGaussian {
        PyGaussian(self.posterior.clone())
    }
}

/// Run an experiment described by a TOML run configuration, optionally
/// writing the manifest, trace and posterior files into `out_dir`.
#[pyfunction]
#[pyo3(signature = (config, out_dir = None))]
fn run_config(py: Python<'_>, config: &str, out_dir: Option<PathBuf>) -> PyResult<PyRunOutput> {
    let cfg = RunConfig::from_toml(config).map_err(err)?;
    let out = py.detach(|| harness::run_experiment(&cfg)).map_err(err)?;
    if let Some(dir) = out_dir {
        harness::write_outputs(&out, &dir).map_err(err)?;
    }
    Ok(PyRunOutput {
        method: out.manifest.method,
        commits: out.manifest.commits,
        converged: out.manifest.converged,
        trace_jsonl: out.trace.to_jsonl(),
        posterior: out.q,
    })
}

/// Run acceptance criteria; returns `(id, passed, report line)` tuples.
#[pyfunction]
fn verify(py: Python<'_>, ids: Vec<u32>) -> PyResult<Vec<(u32, bool, String)>> {
    if let Some(bad) = ids.iter().find(|i| !harness::verify::CRITERIA.contains(i)) {
        return Err(PyIndexError::new_err(format!("no criterion {bad}")));
    }
    let reports = py.detach(|| harness::verify::verify(&ids, None)).map_err(err)?;
    Ok(reports.into_iter().map(|r| (r.id, r.passed, r.to_string())).collect())
}

#[pymodule]
fn pvi_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGaussian>()?;
    m.add_class::<PyFactor>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyRunOutput>()?;
    m.add_function(wrap_pyfunction!(divide, m)?)?;
    m.add_function(wrap_pyfunction!(combine, m)?)?;
    m.add_function(wrap_pyfunction!(local_update, m)?)?;
    m.add_function(wrap_pyfunction!(run_pvi, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
