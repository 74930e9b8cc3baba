//! Python bindings. Vectors and matrices cross the boundary as plain lists.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mixreg::am::{self, AmConfig};
use mixreg::gd::{self, GdConfig, DEFAULT_PROBE_ROUNDS};
use mixreg::linalg::Matrix;
use mixreg::metrics::{self, Window};
use mixreg::spectral::{self, GridSpec};
use mixreg::{datagen, MixregError};

fn to_py(e: MixregError) -> PyErr {
    if e.is_spec_error() || matches!(e, MixregError::DimensionMismatch(_)) {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for mixreg::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Component vectors, mixing weights and noise level of a generative model.
#[pyclass(name = "GroundTruth", module = "pymixreg", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyGroundTruth(datagen::GroundTruth);

#[pymethods]
impl PyGroundTruth {
    #[new]
    #[pyo3(signature = (thetas, mixing=None, sigma=0.0))]
    fn new(thetas: Vec<Vec<f64>>, mixing: Option<Vec<f64>>, sigma: f64) -> PyResult<Self> {
        let k = thetas.len();
        let mixing = mixing.unwrap_or_else(|| vec![1.0 / k.max(1) as f64; k]);
        datagen::GroundTruth::new(thetas, mixing, sigma).py_err().map(Self)
    }

    /// Standard-normal components with uniform mixing.
    #[staticmethod]
    #[pyo3(signature = (k, d, sigma=0.0, seed=0))]
    fn random(k: usize, d: usize, sigma: f64, seed: u64) -> PyResult<Self> {
        datagen::GroundTruth::random(k, d, sigma, seed).py_err().map(Self)
    }

    #[getter]
    fn thetas(&self) -> Vec<Vec<f64>> {
        self.0.thetas().to_vec()
    }

    #[getter]
    fn mixing(&self) -> Vec<f64> {
        self.0.mixing().to_vec()
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.0.sigma()
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.dim()
    }

    fn params(&self) -> PyParamSet {
        PyParamSet(self.0.params())
    }

    /// Largest init radius covered by the local convergence guarantee, or
    /// None when the components coincide.
    fn boundary_radius(&self, n1: usize) -> Option<f64> {
        self.0.boundary_radius(n1)
    }

    fn __repr__(&self) -> String {
        format!("GroundTruth(k={}, d={}, sigma={})", self.0.k(), self.0.dim(), self.0.sigma())
    }
}

/// An ordered list of K parameter vectors.
#[pyclass(name = "ParamSet", module = "pymixreg", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyParamSet(datagen::ParamSet);

#[pymethods]
impl PyParamSet {
    #[new]
    fn new(thetas: Vec<Vec<f64>>) -> PyResult<Self> {
        datagen::ParamSet::new(thetas).py_err().map(Self)
    }

    #[getter]
    fn thetas(&self) -> Vec<Vec<f64>> {
        self.0.thetas().to_vec()
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.dim()
    }

    fn __len__(&self) -> usize {
        self.0.k()
    }

    fn __repr__(&self) -> String {
        format!("ParamSet(k={}, d={})", self.0.k(), self.0.dim())
    }
}

/// Design matrix, responses and, for synthetic data, the latent labels.
#[pyclass(name = "Instance", module = "pymixreg", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyInstance(datagen::Instance);

#[pymethods]
impl PyInstance {
    #[new]
    #[pyo3(signature = (x, y, labels=None))]
    fn new(x: Vec<Vec<f64>>, y: Vec<f64>, labels: Option<Vec<usize>>) -> PyResult<Self> {
        let x = Matrix::from_rows(&x).py_err()?;
        datagen::Instance::new(x, y, labels, None).py_err().map(Self)
    }

    /// Draw `n` samples from `truth`.
    #[staticmethod]
    #[pyo3(signature = (truth, n, seed=0))]
    fn sample(truth: &PyGroundTruth, n: usize, seed: u64) -> PyResult<Self> {
        datagen::sample_instance(&truth.0, n, seed).py_err().map(Self)
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        let x = self.0.x();
        (0..x.rows()).map(|i| x.row(i).to_vec()).collect()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.0.y().to_vec()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<usize>> {
        self.0.labels().map(<[usize]>::to_vec)
    }

    #[getter]
    fn truth(&self) -> Option<PyGroundTruth> {
        self.0.truth().cloned().map(PyGroundTruth)
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.dim()
    }

    fn __len__(&self) -> usize {
        self.0.n()
    }

    fn __repr__(&self) -> String {
        format!("Instance(n={}, d={})", self.0.n(), self.0.dim())
    }
}

/// Per-round record of a solver run.
#[pyclass(name = "Trace", module = "pymixreg", frozen, skip_from_py_object)]
pub struct PyTrace(am::Trace);

#[pymethods]
impl PyTrace {
    #[getter]
    fn iterates(&self) -> Vec<PyParamSet> {
        self.0.iterates.iter().cloned().map(PyParamSet).collect()
    }

    #[getter]
    fn dist(&self) -> Option<Vec<f64>> {
        self.0.dist_to_truth.clone()
    }

    #[getter]
    fn loss(&self) -> Vec<f64> {
        self.0.loss_seq.clone()
    }

    #[getter]
    fn wall_clock(&self) -> Vec<f64> {
        self.0.wall_clock_per_iter.clone()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.0.labels_final.clone()
    }

    #[getter]
    fn converged_at(&self) -> Option<usize> {
        self.0.converged_at
    }

    #[getter]
    fn target_reached_at(&self) -> Option<usize> {
        self.0.target_reached_at
    }

    #[getter]
    fn rounds(&self) -> usize {
        self.0.rounds()
    }

    fn final_params(&self) -> PyParamSet {
        PyParamSet(self.0.final_params().clone())
    }

    fn __repr__(&self) -> String {
        format!("Trace(rounds={}, converged_at={:?})", self.0.rounds(), self.0.converged_at)
    }
}

#[pyfunction]
#[pyo3(signature = (truth, radius, seed=0))]
fn perturbed_init(truth: &PyGroundTruth, radius: f64, seed: u64) -> PyResult<PyParamSet> {
    datagen::perturbed_init(&truth.0, radius, seed).py_err().map(PyParamSet)
}

/// Spectral start. `points_per_axis` and `radius` override the default grid.
#[pyfunction]
#[pyo3(signature = (inst, points_per_axis=None, radius=None))]
fn spectral_init(inst: &PyInstance, points_per_axis: Option<usize>, radius: Option<f64>) -> PyResult<PyParamSet> {
    let grid = match (points_per_axis, radius) {
        (None, None) => None,
        (g, r) => {
            let default = GridSpec::for_instance(&inst.0);
            Some(GridSpec::new(g.unwrap_or(default.points_per_axis), r.unwrap_or(default.radius)).py_err()?)
        }
    };
    spectral::spectral_init(&inst.0, grid).py_err().map(PyParamSet)
}

#[pyfunction]
#[pyo3(signature = (inst, init, max_rounds=50, tol=1e-12, sample_split=false, split_seed=0, target_precision=None))]
fn run_am(
    py: Python<'_>,
    inst: &PyInstance,
    init: &PyParamSet,
    max_rounds: usize,
    tol: f64,
    sample_split: bool,
    split_seed: u64,
    target_precision: Option<f64>,
) -> PyResult<PyTrace> {
    let cfg = AmConfig {
        max_rounds,
        sample_split,
        tol,
        track_truth: inst.0.truth().is_some(),
        target_precision,
        split_seed,
    };
    py.detach(|| am::run_am(&inst.0, &init.0, &cfg)).py_err().map(PyTrace)
}

/// Gradient heuristic; the step size is tuned by doubling when `gamma` is None.
#[pyfunction]
#[pyo3(signature = (inst, init, gamma=None, max_rounds=500, tol=1e-12, target_precision=None))]
fn run_gd(
    py: Python<'_>,
    inst: &PyInstance,
    init: &PyParamSet,
    gamma: Option<f64>,
    max_rounds: usize,
    tol: f64,
    target_precision: Option<f64>,
) -> PyResult<PyTrace> {
    py.detach(|| {
        let gamma = match gamma {
            Some(g) => g,
            None => gd::tune_step_size(&inst.0, &init.0, DEFAULT_PROBE_ROUNDS)?,
        };
        let cfg = GdConfig {
            gamma,
            max_rounds,
            tol,
            target_precision,
            track_truth: inst.0.truth().is_some(),
        };
        gd::run_gd(&inst.0, &init.0, &cfg)
    })
    .py_err()
    .map(PyTrace)
}

#[pyfunction]
#[pyo3(signature = (inst, init, probe_rounds=DEFAULT_PROBE_ROUNDS))]
fn tune_step_size(inst: &PyInstance, init: &PyParamSet, probe_rounds: usize) -> PyResult<f64> {
    gd::tune_step_size(&inst.0, &init.0, probe_rounds).py_err()
}

/// Permutation-invariant max per-component distance.
#[pyfunction]
fn dist(est: &PyParamSet, truth: &PyParamSet) -> PyResult<f64> {
    metrics::dist(&est.0, &truth.0).py_err()
}

#[pyfunction]
fn loss(inst: &PyInstance, params: &PyParamSet) -> PyResult<f64> {
    metrics::loss(&inst.0, &params.0).py_err()
}

/// Indices whose best-fitting component differs from the latent label.
#[pyfunction]
fn mismatch_set(inst: &PyInstance, params: &PyParamSet) -> PyResult<Vec<usize>> {
    metrics::mismatch_set(&inst.0, &params.0).py_err().map(|r| r.indices)
}

/// Fit log e_{t+1} against log e_t. Returns (slope, intercept, r_squared, points_used).
#[pyfunction]
#[pyo3(signature = (seq, lower=None, upper=None))]
fn fit_convergence_exponent(seq: Vec<f64>, lower: Option<f64>, upper: Option<f64>) -> PyResult<(f64, f64, f64, usize)> {
    let default = Window::for_sequence(&seq);
    let window = Window::new(lower.unwrap_or(default.lower), upper.unwrap_or(default.upper));
    let f = metrics::fit_convergence_exponent(&seq, window).py_err()?;
    Ok((f.slope, f.intercept, f.r_squared, f.points_used))
}

#[pymodule]
fn pymixreg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGroundTruth>()?;
    m.add_class::<PyParamSet>()?;
    m.add_class::<PyInstance>()?;
    m.add_class::<PyTrace>()?;
    m.add_function(wrap_pyfunction!(perturbed_init, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_init, m)?)?;
    m.add_function(wrap_pyfunction!(run_am, m)?)?;
    m.add_function(wrap_pyfunction!(run_gd, m)?)?;
    m.add_function(wrap_pyfunction!(tune_step_size, m)?)?;
    m.add_function(wrap_pyfunction!(dist, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(mismatch_set, m)?)?;
    m.add_function(wrap_pyfunction!(fit_convergence_exponent, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_map_to_python_types() {
        Python::attach(|py| {
            let e = to_py(MixregError::InvalidArgument("x".into()));
            assert!(e.is_instance_of::<PyValueError>(py));
            let e = to_py(MixregError::NoConvergence { iterations: 3 });
            assert!(e.is_instance_of::<PyRuntimeError>(py));
        });
    }

    #[test]
    fn am_through_bindings_recovers_truth() {
        Python::attach(|py| {
            let truth = PyGroundTruth::random(2, 8, 0.0, 1).unwrap();
            let inst = PyInstance::sample(&truth, 200, 2).unwrap();
            let r = truth.boundary_radius(200).unwrap();
            let init = perturbed_init(&truth, r, 3).unwrap();
            let trace = run_am(py, &inst, &init, 50, 1e-12, false, 0, None).unwrap();
            assert!(dist(&trace.final_params(), &truth.params()).unwrap() < 1e-10);
            assert_eq!(trace.dist().unwrap().len(), trace.rounds() + 1);
        });
    }

    #[test]
    fn module_exposes_names() {
        Python::attach(|py| {
            let m = PyModule::new(py, "pymixreg").unwrap();
            pymixreg(&m).unwrap();
            for name in ["GroundTruth", "Instance", "ParamSet", "run_am", "run_gd", "spectral_init", "dist"] {
                assert!(m.hasattr(name).unwrap(), "{name}");
            }
        });
    }
}
