//! Fully backward regression scheme: the regression grid is the time
//! reversal of an Ornstein-Uhlenbeck diffusion whose affine drift is refitted
//! at every step to the optimally controlled drift.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian_flow::{
    backward_cov_step, backward_mean_step, check_admissible, diffusion_matrix, forward_cov_step, GaussianState,
};
use crate::linalg::{project_psd, GaussianSampler, LinearSolver, SymmetricMatrix};
use crate::output::{Scheme, SolverOutput, StepDiagnostics};
use crate::problem::{hamiltonian_argmin, validate_problem, ControlProblem};
use crate::regression::{basis_size, drift_residual, fit_affine_drift, fit_value_with_diagnostics, AffineDrift, PolynomialModel};
use crate::rng::{fill_normal, stream, Domain};

const REGULARIZATION: f64 = 1e-12;

/// Grid points and their carried costs, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    dim: usize,
    pub states: Vec<f64>,
    pub costs: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn new(dim: usize, states: Vec<f64>, costs: Vec<f64>) -> Result<Self> {
        if dim == 0 || states.len() != dim * costs.len() {
            return Err(Error::InvalidInput("ensemble states and costs disagree in count".into()));
        }
        Ok(ParticleEnsemble { dim, states, costs })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.costs.len()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    /// Number of stored values.
    pub fn footprint(&self) -> usize {
        self.states.len() + self.costs.len()
    }

    /// Empirical mean and (unbiased) covariance of the states.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        empirical_moments(&self.states, self.dim)
    }
}

pub(crate) fn empirical_moments(states: &[f64], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = states.len() / d;
    let mut mean = DVector::zeros(d);
    for x in states.chunks(d) {
        for j in 0..d {
            mean[j] += x[j];
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for x in states.chunks(d) {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]);
            }
        }
    }
    cov /= (n.max(2) - 1) as f64;
    (mean, cov)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DriftMode {
    /// Refit `(a, c)` to the controlled drift at every step.
    Adaptive,
    /// Use the same `(a, c)` at every step.
    Frozen(AffineDrift),
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub steps: usize,
    pub particles: usize,
    pub degree: u32,
    pub seed: u64,
    /// Grid law at the horizon, `N(m̄_n, Q̄_n)`.
    pub terminal: GaussianState,
    pub drift: DriftMode,
}

impl SolverConfig {
    pub fn new(steps: usize, particles: usize, degree: u32, seed: u64, terminal: GaussianState) -> Self {
        SolverConfig {
            steps,
            particles,
            degree,
            seed,
            terminal,
            drift: DriftMode::Adaptive,
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("number of steps must be at least 1".into()));
        }
        if self.steps >= 1 << 24 {
            return Err(Error::Config("too many steps".into()));
        }
        let m = basis_size(d, self.degree)?;
        if self.particles < m.max(d + 1) {
            return Err(Error::Underdetermined {
                samples: self.particles,
                unknowns: m.max(d + 1),
            });
        }
        if self.terminal.dim() != d {
            return Err(Error::Config(format!(
                "terminal grid law has dimension {}, problem has {d}",
                self.terminal.dim()
            )));
        }
        if let DriftMode::Frozen(drift) = &self.drift {
            if drift.dim() != d || !drift.is_finite() {
                return Err(Error::Config("frozen drift must be finite and match the state dimension".into()));
            }
        }
        Ok(())
    }
}

/// Feedback quantities at a set of grid points.
pub(crate) struct Feedback {
    pub grads: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
    pub drifts: Vec<f64>,
}

impl Feedback {
    pub fn footprint(&self) -> usize {
        self.grads.len() + self.drifts.len() + self.actions.iter().map(Vec::len).sum::<usize>()
    }
}

/// Gradient of `v_{k+1}` (of `g` when `model` is `None`), optimal action and
/// controlled drift at every point.
pub(crate) fn feedback(problem: &dyn ControlProblem, t: f64, states: &[f64], model: Option<&PolynomialModel>) -> Result<Feedback> {
    let d = problem.dim();
    let mut grads = vec![0.0; states.len()];
    grads.par_chunks_mut(d).zip(states.par_chunks(d)).for_each(|(g, x)| match model {
        Some(m) => m.gradient_into(x, g),
        None => problem.terminal_gradient(x, g),
    });
    let actions: Vec<Vec<f64>> = states
        .par_chunks(d)
        .zip(grads.par_chunks(d))
        .map(|(x, g)| hamiltonian_argmin(problem, t, x, g))
        .collect::<Result<_>>()?;
    let mut drifts = vec![0.0; states.len()];
    drifts
        .par_chunks_mut(d)
        .zip(states.par_chunks(d))
        .zip(&actions)
        .for_each(|((b, x), a)| problem.drift(t, x, a, b));
    Ok(Feedback { grads, actions, drifts })
}

struct StepControl {
    feedback: Feedback,
    drift: AffineDrift,
    drift_residual: f64,
    zero_drift_residual: f64,
}

fn control_step(
    problem: &dyn ControlProblem,
    mode: &DriftMode,
    t: f64,
    states: &[f64],
    model: Option<&PolynomialModel>,
) -> Result<StepControl> {
    let d = problem.dim();
    let fb = feedback(problem, t, states, model)?;
    let (drift, drift_residual) = match mode {
        DriftMode::Adaptive => fit_affine_drift(states, &fb.drifts, d)?,
        DriftMode::Frozen(drift) => (drift.clone(), drift_residual(drift, states, &fb.drifts, d)),
    };
    let zero_drift_residual = drift_residual_of_zero(&fb.drifts, d);
    Ok(StepControl {
        feedback: fb,
        drift,
        drift_residual,
        zero_drift_residual,
    })
}

fn drift_residual_of_zero(b: &[f64], d: usize) -> f64 {
    b.iter().map(|v| v * v).sum::<f64>() / (b.len() / d) as f64
}

fn sample_particles(sampler: &GaussianSampler, count: usize, seed: u64, domain: Domain, step: usize) -> Vec<f64> {
    let d = sampler.dim();
    let mut states = vec![0.0; count * d];
    states.par_chunks_mut(d).enumerate().for_each(|(i, x)| {
        let mut rng = stream(seed, domain, step, i);
        sampler.sample_into(&mut rng, x);
    });
    states
}

fn carried_values(problem: &dyn ControlProblem, states: &[f64], model: Option<&PolynomialModel>) -> Vec<f64> {
    states
        .par_chunks(problem.dim())
        .map(|x| match model {
            Some(m) => m.eval(x),
            None => problem.terminal_cost(x),
        })
        .collect()
}

/// Solver for `Q x = r` behind the correction drift, regularized when `Q`
/// is numerically singular. Returns the solver and whether it regularized.
fn correction_solver(cov: &SymmetricMatrix, step: usize) -> Result<(LinearSolver, bool)> {
    match LinearSolver::new(cov.as_matrix()) {
        Ok(s) => Ok((s, false)),
        Err(Error::Singular { .. }) => {
            let d = cov.dim();
            let shift = REGULARIZATION * cov.trace();
            let reg = cov.as_matrix() + DMatrix::identity(d, d) * shift;
            LinearSolver::new(&reg).map(|s| (s, true)).map_err(|e| Error::NearSingularCovariance {
                step,
                source: Box::new(e),
            })
        }
        Err(e) => Err(e),
    }
}

fn check_law(mean: &DVector<f64>, cov: &SymmetricMatrix) -> Result<()> {
    if mean.iter().all(|v| v.is_finite()) && cov.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical {
            context: "grid law update".into(),
            detail: "mean or covariance overflowed".into(),
        })
    }
}

/// Runs the fully backward scheme.
pub fn solve_backward(problem: &dyn ControlProblem, config: &SolverConfig) -> Result<SolverOutput> {
    solve_backward_observed(problem, config, &mut |_, _| {})
}

/// Like [`solve_backward`], handing the ensemble at every `t_k` (from
/// `k = n` down to 0) to `observer`. The ensemble is not retained.
pub fn solve_backward_observed(
    problem: &dyn ControlProblem,
    config: &SolverConfig,
    observer: &mut dyn FnMut(usize, &ParticleEnsemble),
) -> Result<SolverOutput> {
    let d = problem.dim();
    config.validate(d)?;
    let n = config.steps;
    let count = config.particles;
    let seed = config.seed;
    let horizon = problem.horizon();
    let dt = horizon / n as f64;
    let sq_dt = dt.sqrt();
    let times: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
    validate_problem(problem, &times)?;

    let sampler = GaussianSampler::new(&config.terminal)?;
    let states = sample_particles(&sampler, count, seed, Domain::GridInit, n);
    let costs = carried_values(problem, &states, None);
    let mut ens = ParticleEnsemble { dim: d, states, costs };
    let mut peak = ens.footprint();
    observer(n, &ens);

    let mut gaussians: Vec<Option<GaussianState>> = vec![None; n + 1];
    gaussians[n] = Some(config.terminal.clone());
    let mut values: Vec<Option<PolynomialModel>> = vec![None; n];
    let mut drifts: Vec<Option<AffineDrift>> = vec![None; n];
    let mut diagnostics: Vec<Option<StepDiagnostics>> = vec![None; n];
    let mut next_model: Option<PolynomialModel> = None;

    for k in (0..n).rev() {
        let clock = Instant::now();
        let t1 = times[k + 1];
        let sigma = problem.volatility(t1);
        let sigma_sq = diffusion_matrix(&sigma);
        let GaussianState { mean: mean_next, cov: mut cov_next } = gaussians[k + 1].clone().expect("filled at k+1");

        let at = |e: Error| e.at_step(k);
        let mut ctl = control_step(problem, &config.drift, t1, &ens.states, next_model.as_ref()).map_err(at)?;
        let mut mean_k = backward_mean_step(&mean_next, &ctl.drift, dt).map_err(at)?;
        let mut cov_k = backward_cov_step(&cov_next, &ctl.drift, &sigma_sq, dt).map_err(at)?;
        check_law(&mean_k, &cov_k).map_err(at)?;
        let mut projected = false;
        let mut repeat_projection = false;
        if !check_admissible(&cov_k).map_err(at)? {
            projected = true;
            let cov_proj = project_psd(&cov_k).map_err(at)?;
            cov_next = forward_cov_step(&cov_proj, &ctl.drift, &sigma_sq, dt).map_err(at)?;
            let law = GaussianState {
                mean: mean_next.clone(),
                cov: cov_next.clone(),
            };
            let regen = GaussianSampler::new(&law).map_err(at)?;
            ens.states = sample_particles(&regen, count, seed, Domain::GridRegen, k + 1);
            ens.costs = carried_values(problem, &ens.states, next_model.as_ref());
            gaussians[k + 1] = Some(law);
            ctl = control_step(problem, &config.drift, t1, &ens.states, next_model.as_ref()).map_err(at)?;
            mean_k = backward_mean_step(&mean_next, &ctl.drift, dt).map_err(at)?;
            cov_k = backward_cov_step(&cov_next, &ctl.drift, &sigma_sq, dt).map_err(at)?;
            check_law(&mean_k, &cov_k).map_err(at)?;
            if !check_admissible(&cov_k).map_err(at)? {
                repeat_projection = true;
                cov_k = project_psd(&cov_k).map_err(at)?;
            }
        }
        let (solver, regularized) = correction_solver(&cov_next, k + 1)?;

        let fb = &ctl.feedback;
        let drift = &ctl.drift;
        let mut new_states = vec![0.0; count * d];
        let mut targets = vec![0.0; count];
        new_states
            .par_chunks_mut(d)
            .zip(targets.par_iter_mut())
            .enumerate()
            .for_each(|(i, (out, target))| {
                let x = ens.state(i);
                let b = &fb.drifts[i * d..(i + 1) * d];
                let grad = &fb.grads[i * d..(i + 1) * d];
                let tilde = drift.apply(x);
                let centered = DVector::from_fn(d, |j, _| x[j] - mean_next[j]);
                let correction = sigma_sq.as_matrix() * solver.solve(&centered);
                let mut eps = vec![0.0; d];
                fill_normal(&mut stream(seed, Domain::GridStep, k, i), &mut eps);
                let noise = &sigma * DVector::from_vec(eps);
                let mut pairing = 0.0;
                for j in 0..d {
                    pairing += (tilde[j] - b[j]) * grad[j];
                    out[j] = x[j] - (tilde[j] + correction[j]) * dt + noise[j] * sq_dt;
                }
                let f = problem.running_cost(t1, x, &fb.actions[i]);
                *target = ens.costs[i] + (f - pairing) * dt;
            });
        let live = ens.footprint() + fb.footprint() + new_states.len() + targets.len();
        peak = peak.max(live);

        if new_states.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                context: format!("backward grid at step {k}"),
                detail: "non-finite particle".into(),
            });
        }
        let (model, fit) = fit_value_with_diagnostics(&new_states, d, &targets, config.degree).map_err(at)?;
        ens.states = new_states;
        ens.costs = targets;
        observer(k, &ens);

        diagnostics[k] = Some(StepDiagnostics {
            k,
            t: times[k],
            mean: mean_k.iter().copied().collect(),
            cov_eigenvalues: cov_k.eigenvalues().map_err(at)?,
            value_residual: fit.residual,
            design_condition: fit.condition,
            design_rank: fit.rank,
            drift_residual: ctl.drift_residual,
            zero_drift_residual: ctl.zero_drift_residual,
            projected,
            repeat_projection,
            regularized,
            particle_memory: live,
            wall_time_s: clock.elapsed().as_secs_f64(),
        });
        gaussians[k] = Some(GaussianState { mean: mean_k, cov: cov_k });
        drifts[k] = Some(ctl.drift);
        values[k] = Some(model.clone());
        next_model = Some(model);
    }

    Ok(SolverOutput {
        scheme: Scheme::Backward,
        dim: d,
        degree: config.degree,
        horizon,
        steps: n,
        values: values.into_iter().map(Option::unwrap).collect(),
        drifts: drifts.into_iter().map(Option::unwrap).collect(),
        gaussians: gaussians.into_iter().map(Option::unwrap).collect(),
        diagnostics: diagnostics.into_iter().map(Option::unwrap).collect(),
        peak_particle_memory: peak,
    })
}
