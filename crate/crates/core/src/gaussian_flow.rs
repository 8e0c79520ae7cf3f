//! Means and covariances of the instrumental Ornstein–Uhlenbeck process,
//! propagated backward from the terminal law.
//!
//! For a piecewise-affine drift `a x + c` and volatility `σ(t)` with
//! `Σ = σσᵀ`, the law at time `t` is Gaussian with
//!
//! ```text
//! m'(t) = a m(t) + c,              m(T) = m̄
//! Q'(t) = a Q + Q aᵀ + Σ(t),       Q(T) = Q̄
//! ```
//!
//! Integrated backward these lose variance, so the terminal covariance has
//! to be large enough for `Q(0)` to stay positive semidefinite.

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{Error, Result};
use crate::linalg::{matrix_exp, SymmetricMatrix};
use crate::quadrature::{integrate, integrate_scalar};
use crate::regression::AffineDrift;

/// Relative tolerance of the flow quadratures.
const FLOW_QUAD_TOL: f64 = 1e-10;
/// `Q` is admissible when `min eig(Q) >= -ADMISSIBLE_TOL * trace(Q)`.
pub const ADMISSIBLE_TOL: f64 = 1e-10;

/// Gaussian law at a grid instant.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov: SymmetricMatrix,
}

impl GaussianState {
    /// Validating constructor: dimensions agree and the covariance is PSD up
    /// to the admissibility tolerance.
    pub fn new(mean: DVector<f64>, cov: SymmetricMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::InvalidInput(format!(
                "mean has dimension {} but covariance is {}x{}",
                mean.len(),
                cov.dim(),
                cov.dim()
            )));
        }
        if !check_admissible(&cov)? {
            return Err(Error::InvalidState("covariance is not positive semidefinite".into()));
        }
        Ok(GaussianState { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Piecewise-constant drift coefficients on a regular grid: `entries[k]`
/// applies on `(t_k, t_{k+1}]`.
#[derive(Debug, Clone)]
pub struct DriftSchedule {
    pub dt: f64,
    pub entries: Vec<AffineDrift>,
}

impl DriftSchedule {
    pub fn new(dt: f64, entries: Vec<AffineDrift>) -> Result<Self> {
        if !(dt > 0.0) || entries.is_empty() {
            return Err(Error::InvalidInput("drift schedule needs dt > 0 and at least one step".into()));
        }
        let d = entries[0].dim();
        if entries.iter().any(|e| e.dim() != d || !e.is_finite()) {
            return Err(Error::InvalidInput("drift schedule entries must be finite and share a dimension".into()));
        }
        Ok(DriftSchedule { dt, entries })
    }

    /// Same `(a, c)` on every step.
    pub fn constant(drift: AffineDrift, horizon: f64, steps: usize) -> Result<Self> {
        Self::new(horizon / steps as f64, vec![drift; steps])
    }

    pub fn steps(&self) -> usize {
        self.entries.len()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].dim()
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.entries.len() as f64
    }

    fn node(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Index of the piece containing `t`, treating pieces as `(t_k, t_{k+1}]`
    /// and `t = 0` as belonging to the first one.
    fn piece_of(&self, t: f64) -> usize {
        let n = self.steps();
        let k = (t / self.dt).ceil() as usize;
        k.saturating_sub(1).min(n - 1)
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("time step must be positive, got {dt}")))
    }
}

/// `m_k = e^{-a dt} m_{k+1} - c dt`.
pub fn backward_mean_step(next: &DVector<f64>, drift: &AffineDrift, dt: f64) -> Result<DVector<f64>> {
    check_dt(dt)?;
    if next.len() != drift.dim() || next.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("mean must be finite and match the drift dimension".into()));
    }
    let e = matrix_exp(&drift.a, -dt)?;
    Ok(e * next - &drift.c * dt)
}

/// `Q_k = e^{-a dt} Q_{k+1} e^{-aᵀ dt} - Σ dt`. May be indefinite.
pub fn backward_cov_step(
    next: &SymmetricMatrix,
    drift: &AffineDrift,
    sigma_sq: &SymmetricMatrix,
    dt: f64,
) -> Result<SymmetricMatrix> {
    check_dt(dt)?;
    let e = matrix_exp(&drift.a, -dt)?;
    let q = &e * next.as_matrix() * e.transpose() - sigma_sq.as_matrix() * dt;
    Ok(SymmetricMatrix::from_matrix(q))
}

/// Inverse of [`backward_cov_step`]: `e^{a dt} (Q_k + Σ dt) e^{aᵀ dt}`.
pub fn forward_cov_step(
    current: &SymmetricMatrix,
    drift: &AffineDrift,
    sigma_sq: &SymmetricMatrix,
    dt: f64,
) -> Result<SymmetricMatrix> {
    check_dt(dt)?;
    let e = matrix_exp(&drift.a, dt)?;
    let q = &e * (current.as_matrix() + sigma_sq.as_matrix() * dt) * e.transpose();
    Ok(SymmetricMatrix::from_matrix(q))
}

/// `Σ(t) = σ(t) σ(t)ᵀ`.
pub fn diffusion_matrix(sigma: &DMatrix<f64>) -> SymmetricMatrix {
    SymmetricMatrix::from_matrix(sigma * sigma.transpose())
}

/// True iff `min eig(q) >= -1e-10 * trace(q)`.
pub fn check_admissible(q: &SymmetricMatrix) -> Result<bool> {
    let min = q.min_eigenvalue()?;
    Ok(min >= -ADMISSIBLE_TOL * q.trace())
}

fn flatten(m: &DMatrix<f64>) -> Vec<f64> {
    m.as_slice().to_vec()
}

/// Propagates `(m, Q)` known at `t_end` back over `tau` with constant
/// `(a, c)`, using the exact integrals.
fn exact_piece(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    drift: &AffineDrift,
    sigma: &(dyn Fn(f64) -> DMatrix<f64> + Sync),
    t_end: f64,
    tau: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = drift.dim();
    if tau == 0.0 {
        return Ok((mean.clone(), cov.clone()));
    }
    let t = t_end - tau;
    let e = matrix_exp(&drift.a, -tau)?;

    // ∫_0^τ e^{-a u} du · c
    let c_int = integrate(
        |u| {
            let eu = matrix_exp(&drift.a, -u).expect("finite drift");
            (eu * &drift.c).as_slice().to_vec()
        },
        0.0,
        tau,
        FLOW_QUAD_TOL,
        1e-300,
    )?;
    let m = &e * mean - DVector::from_vec(c_int);

    // ∫_t^{t_end} e^{-a(s-t)} Σ(s) e^{-aᵀ(s-t)} ds
    let s_int = integrate(
        |s| {
            let es = matrix_exp(&drift.a, -(s - t)).expect("finite drift");
            let sg = sigma(s);
            flatten(&(&es * &sg * sg.transpose() * es.transpose()))
        },
        t,
        t_end,
        FLOW_QUAD_TOL,
        1e-300,
    )?;
    let q = &e * cov * e.transpose() - DMatrix::from_column_slice(d, d, &s_int);
    Ok((m, q))
}

/// Evaluates `(m(t), Q(t))` at each requested time by the explicit
/// solution formulas, integrating the forcing terms by adaptive quadrature.
///
/// Returned covariances are symmetric but are not checked for
/// positivity: an inadmissible terminal law yields indefinite `Q(t)` near 0.
pub fn continuous_backward_flow(
    terminal: &GaussianState,
    schedule: &DriftSchedule,
    sigma: &(dyn Fn(f64) -> DMatrix<f64> + Sync),
    times: &[f64],
) -> Result<Vec<GaussianState>> {
    let n = schedule.steps();
    let horizon = schedule.horizon();
    if terminal.dim() != schedule.dim() {
        return Err(Error::InvalidInput("terminal law and drift schedule dimensions differ".into()));
    }
    if let Some(t) = times.iter().find(|t| !(**t >= 0.0 && **t <= horizon * (1.0 + 1e-12))) {
        return Err(Error::InvalidInput(format!("time {t} outside [0, {horizon}]")));
    }
    // states at the grid nodes t_n, t_{n-1}, ...
    let needed = times.iter().map(|&t| schedule.piece_of(t)).min().unwrap_or(n);
    let mut nodes: Vec<(DVector<f64>, DMatrix<f64>)> = vec![(DVector::zeros(0), DMatrix::zeros(0, 0)); n + 1];
    nodes[n] = (terminal.mean.clone(), terminal.cov.as_matrix().clone());
    for k in ((needed + 1)..n).rev() {
        let (m, q) = &nodes[k + 1];
        let next = exact_piece(m, q, &schedule.entries[k], sigma, schedule.node(k + 1), schedule.dt)?;
        nodes[k] = next;
    }
    times
        .iter()
        .map(|&t| {
            let k = schedule.piece_of(t);
            let t_end = schedule.node(k + 1);
            let (m, q) = &nodes[k + 1];
            let (m, q) = exact_piece(m, q, &schedule.entries[k], sigma, t_end, (t_end - t).max(0.0))?;
            Ok(GaussianState {
                mean: m,
                cov: SymmetricMatrix::from_matrix(q),
            })
        })
        .collect()
}

/// Fundamental-matrix propagator `A(T) A(s)^{-1}` for the piecewise-constant
/// schedule.
pub fn propagator_to_horizon(schedule: &DriftSchedule, s: f64) -> Result<DMatrix<f64>> {
    let k = schedule.piece_of(s);
    let mut p = matrix_exp(&schedule.entries[k].a, schedule.node(k + 1) - s)?;
    for j in (k + 1)..schedule.steps() {
        p = matrix_exp(&schedule.entries[j].a, schedule.dt)? * p;
    }
    Ok(p)
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    SVD::new(m.clone(), false, false).singular_values.max()
}

/// Checks `min Sp(Q̄) >= ∫_0^T |σ(s)|² |(A(T) A(s)^{-1})ᵀ|² ds` with operator
/// 2-norms. A `true` result guarantees `Q(0)` is admissible.
pub fn sufficient_condition(
    terminal_cov: &SymmetricMatrix,
    sigma: &(dyn Fn(f64) -> DMatrix<f64> + Sync),
    schedule: &DriftSchedule,
    horizon: f64,
) -> Result<bool> {
    if (schedule.horizon() - horizon).abs() > 1e-12 * horizon.abs().max(1.0) {
        return Err(Error::InvalidInput(format!(
            "schedule covers [0, {}] but horizon is {horizon}",
            schedule.horizon()
        )));
    }
    let mut integral = 0.0;
    // Within piece k the integrand is smooth; the tail propagator is fixed.
    let mut tail = DMatrix::<f64>::identity(schedule.dim(), schedule.dim());
    for k in (0..schedule.steps()).rev() {
        let a = &schedule.entries[k].a;
        let t_end = schedule.node(k + 1);
        let piece = integrate_scalar(
            |s| {
                let phi = &tail * matrix_exp(a, t_end - s).expect("finite drift");
                spectral_norm(&sigma(s)).powi(2) * spectral_norm(&phi.transpose()).powi(2)
            },
            schedule.node(k),
            t_end,
            FLOW_QUAD_TOL,
        )?;
        integral += piece;
        tail = &tail * matrix_exp(a, schedule.dt)?;
    }
    Ok(terminal_cov.min_eigenvalue()? >= integral)
}
