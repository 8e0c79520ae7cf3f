//! Python module `bwd_hjb`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use bwd_hjb::backward_solver::{solve_backward as solve_bwd, SolverConfig};
use bwd_hjb::evaluation;
use bwd_hjb::families::{HeatProblem, LqrProblem};
use bwd_hjb::forward_solver::{solve_forward as solve_fwd, ForwardConfig};
use bwd_hjb::gaussian_flow::GaussianState;
use bwd_hjb::linalg::{self, SymmetricMatrix};
use bwd_hjb::output::SolverOutput;
use bwd_hjb::problem::ControlProblem;
use bwd_hjb::regression;
use bwd_hjb::rng::{stream, Domain};
use bwd_hjb::tcl::{nominal_profile, sample_population, target_profile, ParamRanges, TclProblem};
use bwd_hjb::Error;

create_exception!(bwd_hjb, NumericalError, PyRuntimeError);

fn to_py(e: Error) -> PyErr {
    match e {
        e if e.is_numerical() => NumericalError::new_err(e.to_string()),
        Error::Io(_) | Error::Csv(_) => PyOSError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn square(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("expected a non-empty square matrix"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Polynomial value model of total degree at most 2.
#[pyclass(name = "PolynomialModel", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel(regression::PolynomialModel);

#[pymethods]
impl PyModel {
    #[new]
    fn new(dim: usize, degree: u32, coefficients: Vec<f64>) -> PyResult<Self> {
        regression::PolynomialModel::new(dim, degree, coefficients).map(PyModel).map_err(to_py)
    }

    /// Least-squares fit of `targets` on the monomial basis at `points`.
    #[staticmethod]
    fn fit(points: Vec<Vec<f64>>, targets: Vec<f64>, degree: u32) -> PyResult<Self> {
        let dim = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return Err(PyValueError::new_err("points must share one dimension"));
        }
        let flat: Vec<f64> = points.concat();
        regression::fit_value(&flat, dim, &targets, degree).map(PyModel).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn degree(&self) -> u32 {
        self.0.degree()
    }

    #[getter]
    fn coefficients(&self) -> Vec<f64> {
        self.0.coefficients().to_vec()
    }

    fn __call__(&self, x: Vec<f64>) -> PyResult<f64> {
        self.check(&x)?;
        Ok(self.0.eval(&x))
    }

    fn gradient(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check(&x)?;
        Ok(self.0.gradient(&x))
    }

    fn __repr__(&self) -> String {
        format!("PolynomialModel(dim={}, degree={})", self.0.dim(), self.0.degree())
    }
}

impl PyModel {
    fn check(&self, x: &[f64]) -> PyResult<()> {
        if x.len() == self.0.dim() {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!("expected a point of length {}", self.0.dim())))
        }
    }
}

/// A control problem with its benchmark starting point and nominal control.
#[pyclass(name = "Problem", frozen)]
struct PyProblem {
    inner: Arc<dyn ControlProblem>,
    family: &'static str,
    x0: Vec<f64>,
    nominal: Vec<f64>,
}

#[pymethods]
impl PyProblem {
    /// Scalar linear-quadratic problem with a closed-form value.
    #[staticmethod]
    #[pyo3(signature = (sigma = 0.1, horizon = 1.0, bound = 10.0, x0 = 1.0))]
    fn lqr(sigma: f64, horizon: f64, bound: f64, x0: f64) -> PyResult<Self> {
        Ok(PyProblem {
            inner: Arc::new(LqrProblem::new(sigma, horizon, bound).map_err(to_py)?),
            family: "lqr",
            x0: vec![x0],
            nominal: vec![0.0],
        })
    }

    /// Uncontrolled Brownian motion with terminal cost `|x|²`.
    #[staticmethod]
    #[pyo3(signature = (dim, scale = 1.0, horizon = 1.0))]
    fn heat(dim: usize, scale: f64, horizon: f64) -> PyResult<Self> {
        if dim == 0 || scale.is_nan() || scale <= 0.0 || horizon.is_nan() || horizon <= 0.0 {
            return Err(PyValueError::new_err("dim, scale and horizon must be positive"));
        }
        Ok(PyProblem {
            inner: Arc::new(HeatProblem::new(dim, scale, horizon)),
            family: "heat",
            x0: vec![0.0; dim],
            nominal: vec![0.0],
        })
    }

    /// Thermostatic load benchmark with `dim` clusters drawn from the
    /// default parameter ranges.
    #[staticmethod]
    #[pyo3(signature = (dim, steps = 60, horizon = 1.0, seed = 1, profile_draws = 100))]
    fn tcl(py: Python<'_>, dim: usize, steps: usize, horizon: f64, seed: u64, profile_draws: usize) -> PyResult<Self> {
        let ranges = ParamRanges {
            horizon,
            steps,
            ..ParamRanges::default()
        };
        let problem = py
            .detach(|| -> bwd_hjb::Result<TclProblem> {
                let r_nom = nominal_profile(&ranges, dim, profile_draws, seed)?;
                let params = sample_population(&ranges, dim, &mut stream(seed, Domain::Population, 0, 0))?;
                TclProblem::new(params, target_profile(&r_nom, horizon), horizon)
            })
            .map_err(to_py)?;
        Ok(PyProblem {
            x0: problem.initial_state(),
            nominal: problem.nominal_control(),
            inner: Arc::new(problem),
            family: "tcl",
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.horizon()
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.family
    }

    #[getter]
    fn x0(&self) -> Vec<f64> {
        self.x0.clone()
    }

    #[getter]
    fn nominal_control(&self) -> Vec<f64> {
        self.nominal.clone()
    }

    fn terminal_cost(&self, x: Vec<f64>) -> PyResult<f64> {
        if x.len() != self.inner.dim() {
            return Err(PyValueError::new_err("point has the wrong dimension"));
        }
        Ok(self.inner.terminal_cost(&x))
    }

    fn __repr__(&self) -> String {
        format!("Problem(family={:?}, dim={})", self.family, self.inner.dim())
    }
}

/// Value models, drifts and diagnostics of one solver run.
#[pyclass(name = "SolverResult", frozen)]
struct PyResultObj {
    out: SolverOutput,
    problem: Arc<dyn ControlProblem>,
}

#[pymethods]
impl PyResultObj {
    #[getter]
    fn scheme(&self) -> &'static str {
        self.out.scheme.name()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.out.steps
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.out.horizon
    }

    #[getter]
    fn peak_particle_memory(&self) -> usize {
        self.out.peak_particle_memory
    }

    /// `v_k(x)`; `k = steps` gives the terminal cost.
    fn value(&self, k: usize, x: Vec<f64>) -> PyResult<f64> {
        self.out.value(self.problem.as_ref(), k, &x).map_err(to_py)
    }

    fn gradient(&self, k: usize, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let mut g = vec![0.0; x.len()];
        self.out.gradient_into(self.problem.as_ref(), k, &x, &mut g).map_err(to_py)?;
        Ok(g)
    }

    /// Fitted model at step `k < steps`.
    fn model(&self, k: usize) -> PyResult<PyModel> {
        self.out
            .values
            .get(k)
            .cloned()
            .map(PyModel)
            .ok_or_else(|| PyValueError::new_err(format!("no fitted model at step {k}")))
    }

    /// Grid laws `(mean, cov)` for `k = 0..=steps` (backward scheme only).
    fn gaussians(&self) -> Vec<(Vec<f64>, Vec<Vec<f64>>)> {
        self.out
            .gaussians
            .iter()
            .map(|g| (g.mean.iter().copied().collect(), rows_of(g.cov.as_matrix())))
            .collect()
    }

    fn models_text(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.out.write_models(&mut buf).map_err(to_py)?;
        Ok(String::from_utf8(buf).expect("models are ASCII"))
    }

    fn diagnostics_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.out.write_diagnostics(&mut buf, false).map_err(to_py)?;
        Ok(String::from_utf8(buf).expect("diagnostics are ASCII"))
    }
}

/// Fully backward scheme with terminal grid law `N(mean, terminal_cov I)`;
/// `mean` defaults to the problem's starting point.
#[pyfunction]
#[pyo3(signature = (problem, steps, particles, degree = 2, seed = 0, terminal_cov = 1.0, terminal_mean = None))]
#[allow(clippy::too_many_arguments)]
fn solve_backward(
    py: Python<'_>,
    problem: &PyProblem,
    steps: usize,
    particles: usize,
    degree: u32,
    seed: u64,
    terminal_cov: f64,
    terminal_mean: Option<Vec<f64>>,
) -> PyResult<PyResultObj> {
    let d = problem.inner.dim();
    let mean = terminal_mean.unwrap_or_else(|| problem.x0.clone());
    if mean.len() != d {
        return Err(PyValueError::new_err("terminal_mean has the wrong dimension"));
    }
    let terminal = GaussianState::new(DVector::from_vec(mean), SymmetricMatrix::identity(d).scaled(terminal_cov)).map_err(to_py)?;
    let config = SolverConfig::new(steps, particles, degree, seed, terminal);
    let p = problem.inner.clone();
    let out = py.detach(|| solve_bwd(p.as_ref(), &config)).map_err(to_py)?;
    Ok(PyResultObj {
        out,
        problem: problem.inner.clone(),
    })
}

/// Forward-grid baseline started at `x0` under the problem's nominal control.
#[pyfunction]
#[pyo3(signature = (problem, steps, particles, degree = 2, seed = 0, x0 = None))]
fn solve_forward(
    py: Python<'_>,
    problem: &PyProblem,
    steps: usize,
    particles: usize,
    degree: u32,
    seed: u64,
    x0: Option<Vec<f64>>,
) -> PyResult<PyResultObj> {
    let x0 = x0.unwrap_or_else(|| problem.x0.clone());
    let nominal = problem.nominal.clone();
    let config = ForwardConfig::from_point(steps, particles, degree, seed, &x0, Arc::new(move |_| nominal.clone()));
    let p = problem.inner.clone();
    let out = py.detach(|| solve_fwd(p.as_ref(), &config)).map_err(to_py)?;
    Ok(PyResultObj {
        out,
        problem: problem.inner.clone(),
    })
}

/// Realized costs of `paths` closed-loop trajectories from `x0`.
#[pyfunction]
#[pyo3(signature = (problem, result, paths, seed = 0, x0 = None))]
fn rollout(py: Python<'_>, problem: &PyProblem, result: &PyResultObj, paths: usize, seed: u64, x0: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
    let x0 = x0.unwrap_or_else(|| problem.x0.clone());
    let p = problem.inner.clone();
    py.detach(|| evaluation::rollout_policy(p.as_ref(), &result.out, &x0, paths, seed)).map_err(to_py)
}

/// `(J_hat, sigma_hat)` of a replicate-by-path cost matrix.
#[pyfunction]
fn estimate_j(costs: Vec<Vec<f64>>) -> PyResult<(f64, f64)> {
    evaluation::estimate_j(&costs).map_err(to_py)
}

#[pyfunction]
fn project_psd(matrix: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let m = square(&matrix)?;
    if m != m.transpose() {
        return Err(PyValueError::new_err("matrix is not symmetric"));
    }
    let p = linalg::project_psd(&SymmetricMatrix::from_matrix(m)).map_err(to_py)?;
    Ok(rows_of(p.as_matrix()))
}

/// `e^{m t}`.
#[pyfunction]
#[pyo3(signature = (matrix, t = 1.0))]
fn matrix_exp(matrix: Vec<Vec<f64>>, t: f64) -> PyResult<Vec<Vec<f64>>> {
    let m = square(&matrix)?;
    Ok(rows_of(&linalg::matrix_exp(&m, t).map_err(to_py)?))
}

/// Runs the command-line tool with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("bwd-hjb".to_string()).chain(args).collect();
    py.detach(|| bwd_hjb::cli::run_args(argv))
}

#[pymodule]
#[pyo3(name = "bwd_hjb")]
fn bwd_hjb_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyProblem>()?;
    m.add_class::<PyResultObj>()?;
    m.add_function(wrap_pyfunction!(solve_backward, m)?)?;
    m.add_function(wrap_pyfunction!(solve_forward, m)?)?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_j, m)?)?;
    m.add_function(wrap_pyfunction!(project_psd, m)?)?;
    m.add_function(wrap_pyfunction!(matrix_exp, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    Ok(())
}
