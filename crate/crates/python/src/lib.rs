//! Python bindings. Records come back as plain dicts (through their JSON form).

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use gauss_extremes as ge;
use ge::asymptotics::{Convention, DcConstants};
use ge::constants::{Normalization, PickandsEstimator, PickandsOptions, PiterbargVariant, SupMode};
use ge::simulate::Grid;

fn err(e: ge::Error) -> PyErr {
    if e.exit_code() == 3 {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn sym(rows: Vec<Vec<f64>>) -> PyResult<ge::SymMatrix> {
    ge::SymMatrix::from_rows(&rows).map_err(err)
}

/// Solution of `min x^T Sigma^{-1} x` over `x >= b`.
#[pyclass(name = "QppSolution", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyQppSolution(ge::QppSolution);

#[pymethods]
impl PyQppSolution {
    #[getter]
    fn value(&self) -> f64 {
        self.0.value
    }
    #[getter]
    fn w(&self) -> Vec<f64> {
        self.0.w.clone()
    }
    #[getter]
    fn b_tilde(&self) -> Vec<f64> {
        self.0.b_tilde.clone()
    }
    #[getter]
    fn active_set(&self) -> Vec<usize> {
        self.0.active_set.clone()
    }
    #[getter]
    fn ambiguous(&self) -> bool {
        self.0.ambiguous
    }
    fn __repr__(&self) -> String {
        format!("QppSolution(value={}, active_set={:?})", self.0.value, self.0.active_set)
    }
}

/// Solve the quadratic programming problem; also checks the KKT certificate.
#[pyfunction]
fn solve_qpp(sigma: Vec<Vec<f64>>, b: Vec<f64>) -> PyResult<PyQppSolution> {
    let p = ge::QppProblem::new(sym(sigma)?, b).map_err(err)?;
    let s = ge::solve_qpp(&p).map_err(err)?;
    ge::qpp::check_certificate(&p, &s).map_err(PyArithmeticError::new_err)?;
    Ok(PyQppSolution(s))
}

/// `1 / min_{x >= b} x^T Sigma^{-1} x`.
#[pyfunction]
fn generalized_variance(sigma: Vec<Vec<f64>>, b: Vec<f64>) -> PyResult<f64> {
    let (v, _) = ge::qpp::generalized_variance(&sym(sigma)?, &b).map_err(err)?;
    Ok(1.0 / v)
}

/// Double-crossing model: a stationary or fBm process with thresholds `a` and `b`.
#[pyclass(name = "CovModel", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCovModel(ge::CovModel);

#[pymethods]
impl PyCovModel {
    /// Stationary process with correlation `exp(-theta |t|^alpha)`.
    #[staticmethod]
    #[pyo3(signature = (alpha, theta=1.0, horizon=1.0, a=1.0, b=1.0))]
    fn stationary(alpha: f64, theta: f64, horizon: f64, a: f64, b: f64) -> PyResult<Self> {
        ge::CovModel::stationary(ge::Correlation::pow_exp(theta, alpha), horizon, a, b).map(PyCovModel).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (hurst, horizon=1.0, a=1.0, b=1.0))]
    fn fbm(hurst: f64, horizon: f64, a: f64, b: f64) -> PyResult<Self> {
        ge::CovModel::fbm(hurst, horizon, a, b).map(PyCovModel).map_err(err)
    }

    fn kernel(&self, t: f64, s: f64) -> f64 {
        self.0.kernel(t, s)
    }

    /// Local expansion data of the bivariate field around its variance maximizer.
    fn expansion<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.expansion_data()?)
    }

    /// Derived quantities (QPP solution, Xi matrix, index sets, exponents).
    fn derived<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &ge::models::derive(&self.expansion_data()?).map_err(err)?)
    }

    /// Asymptotic approximation of the double-crossing probability at level `u`.
    #[pyo3(signature = (u, convention="main-theorem"))]
    fn asymptotic<'py>(&self, py: Python<'py>, u: f64, convention: &str) -> PyResult<Bound<'py, PyAny>> {
        let conv = match convention {
            "display" => Convention::Display,
            "main-theorem" | "main_theorem" => Convention::MainTheorem,
            _ => return Err(PyValueError::new_err("convention must be 'display' or 'main-theorem'")),
        };
        let c = DcConstants::with_convention(conv);
        let r = match self.0.hurst() {
            Some(_) => ge::asymptotics::fbm_dc_asymptotic(&self.0, u, &c),
            None => ge::asymptotics::stationary_dc_asymptotic(&self.0, u, &c),
        }
        .map_err(err)?;
        to_py(py, &r)
    }

    /// Crude Monte Carlo estimate on a uniform grid with `steps` intervals.
    #[pyo3(signature = (u, n_paths, seed, steps=1024))]
    fn monte_carlo<'py>(&self, py: Python<'py>, u: f64, n_paths: usize, seed: u64, steps: usize) -> PyResult<Bound<'py, PyAny>> {
        let g = Grid::uniform(self.0.horizon, steps).map_err(err)?;
        let r = py.detach(|| ge::mcverify::mc_double_crossing(&self.0, u, &g, n_paths, seed)).map_err(err)?;
        to_py(py, &r)
    }

    /// Sample paths on a uniform grid; returns one list per path.
    #[pyo3(signature = (n_paths, seed, steps=1024))]
    fn simulate(&self, py: Python<'_>, n_paths: usize, seed: u64, steps: usize) -> PyResult<Vec<Vec<f64>>> {
        let g = Grid::uniform(self.0.horizon, steps).map_err(err)?;
        let batch = py
            .detach(|| match self.0.hurst() {
                Some(h) => ge::simulate::sample_fbm(h, &g, n_paths, seed),
                None => ge::simulate::sample_stationary(self.0.correlation().expect("stationary model"), &g, n_paths, seed),
            })
            .map_err(err)?;
        Ok((0..n_paths).map(|i| batch.path(i).to_vec()).collect())
    }
}

impl PyCovModel {
    fn expansion_data(&self) -> PyResult<ge::ExpansionData> {
        match self.0.hurst() {
            Some(_) => ge::models::build_fbm_dc_model(&self.0),
            None => ge::models::build_stationary_dc_model(&self.0),
        }
        .map_err(err)
    }
}

/// Pickands constant for `alpha = two_h` by Monte Carlo.
#[pyfunction]
#[pyo3(signature = (two_h, seed, s=16.0, step=0.01, n_paths=100_000, estimator="ratio", normalization="classical"))]
fn pickands_constant<'py>(
    py: Python<'py>,
    two_h: f64,
    seed: u64,
    s: f64,
    step: f64,
    n_paths: usize,
    estimator: &str,
    normalization: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let estimator = match estimator {
        "ratio" => PickandsEstimator::Ratio,
        "truncated" => PickandsEstimator::Truncated,
        _ => return Err(PyValueError::new_err("estimator must be 'ratio' or 'truncated'")),
    };
    let normalization = match normalization {
        "classical" => Normalization::Classical,
        "unit-variance" | "unit_variance" => Normalization::UnitVariance,
        _ => return Err(PyValueError::new_err("normalization must be 'classical' or 'unit-variance'")),
    };
    let sup = if two_h == 1.0 { SupMode::BridgeExact } else { SupMode::Grid };
    let opts = PickandsOptions { estimator, normalization, sup };
    let r = py.detach(|| ge::constants::pickands_constant(two_h, s, step, n_paths, seed, opts)).map_err(err)?;
    to_py(py, &r)
}

/// Piterbarg constant for drift `lambda`, with its closed form.
#[pyfunction]
#[pyo3(signature = (drift, seed, lambda_max=20.0, step=0.005, n_paths=100_000))]
fn piterbarg_constant<'py>(
    py: Python<'py>,
    drift: f64,
    seed: u64,
    lambda_max: f64,
    step: f64,
    n_paths: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let r = py
        .detach(|| {
            ge::constants::piterbarg_constant(drift, lambda_max, step, n_paths, seed, PiterbargVariant::Plain, SupMode::BridgeExact)
        })
        .map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("estimate", to_py(py, &r)?)?;
    out.set_item("closed_form", ge::constants::piterbarg_closed_form(drift, PiterbargVariant::Plain).map_err(err)?)?;
    Ok(out)
}

/// `int exp(sum x) 1{x in union of lower orthants at points}` over R^d.
#[pyfunction]
fn orthant_union_integral(points: Vec<Vec<f64>>) -> PyResult<f64> {
    ge::constants::orthant_union_integral(&points).map_err(err)
}

#[pymodule]
fn gauss_extremes_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyQppSolution>()?;
    m.add_class::<PyCovModel>()?;
    m.add_function(wrap_pyfunction!(solve_qpp, m)?)?;
    m.add_function(wrap_pyfunction!(generalized_variance, m)?)?;
    m.add_function(wrap_pyfunction!(pickands_constant, m)?)?;
    m.add_function(wrap_pyfunction!(piterbarg_constant, m)?)?;
    m.add_function(wrap_pyfunction!(orthant_union_integral, m)?)?;
    Ok(())
}
