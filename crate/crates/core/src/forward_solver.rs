//! Baseline regression scheme on a grid simulated forward in time under a
//! fixed nominal control. The whole grid is kept in memory.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::backward_solver::{empirical_moments, feedback};
use crate::error::{Error, Result};
use crate::gaussian_flow::GaussianState;
use crate::linalg::{GaussianSampler, SymmetricMatrix};
use crate::output::{Scheme, SolverOutput, StepDiagnostics};
use crate::problem::{validate_problem, ControlProblem};
use crate::regression::{basis_size, fit_value_with_diagnostics, FitDiagnostics, PolynomialModel};
use crate::rng::{fill_normal, stream, Domain};

pub type NominalControl = Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub struct ForwardConfig {
    pub steps: usize,
    pub particles: usize,
    pub degree: u32,
    pub seed: u64,
    /// Law of the initial state. A zero covariance starts every path at the
    /// mean.
    pub initial: GaussianState,
    pub nominal_control: NominalControl,
}

impl std::fmt::Debug for ForwardConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardConfig")
            .field("steps", &self.steps)
            .field("particles", &self.particles)
            .field("degree", &self.degree)
            .field("seed", &self.seed)
            .field("initial", &self.initial)
            .finish_non_exhaustive()
    }
}

impl ForwardConfig {
    /// Paths all starting at `x0`.
    pub fn from_point(steps: usize, particles: usize, degree: u32, seed: u64, x0: &[f64], nominal_control: NominalControl) -> Self {
        let d = x0.len();
        ForwardConfig {
            steps,
            particles,
            degree,
            seed,
            initial: GaussianState {
                mean: DVector::from_column_slice(x0),
                cov: SymmetricMatrix::zeros(d),
            },
            nominal_control,
        }
    }

    fn validate(&self, problem: &dyn ControlProblem) -> Result<()> {
        let d = problem.dim();
        if self.steps == 0 || self.steps >= 1 << 24 {
            return Err(Error::Config("number of steps must be in [1, 2^24)".into()));
        }
        let m = basis_size(d, self.degree)?;
        if self.particles < m {
            return Err(Error::Underdetermined {
                samples: self.particles,
                unknowns: m,
            });
        }
        if self.initial.dim() != d {
            return Err(Error::Config(format!("initial law has dimension {}, problem has {d}", self.initial.dim())));
        }
        let dt = problem.horizon() / self.steps as f64;
        for k in 0..self.steps {
            let a = (self.nominal_control)(k as f64 * dt);
            if !problem.action_set().contains(&a) {
                return Err(Error::Config(format!("nominal control leaves the action set at step {k}")));
            }
        }
        Ok(())
    }
}

/// Runs the forward-grid baseline.
pub fn solve_forward(problem: &dyn ControlProblem, config: &ForwardConfig) -> Result<SolverOutput> {
    config.validate(problem)?;
    let d = problem.dim();
    let n = config.steps;
    let count = config.particles;
    let horizon = problem.horizon();
    let dt = horizon / n as f64;
    let sq_dt = dt.sqrt();
    let times: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
    validate_problem(problem, &times)?;

    // grid[k] holds the N states at t_k
    let sampler = GaussianSampler::new(&config.initial)?;
    let mut grid: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut first = vec![0.0; count * d];
    first.par_chunks_mut(d).enumerate().for_each(|(i, x)| {
        sampler.sample_into(&mut stream(config.seed, Domain::ForwardGrid, 0, i), x);
    });
    grid.push(first);
    let nominal: Vec<Vec<f64>> = times.iter().map(|&t| (config.nominal_control)(t)).collect();
    for k in 0..n {
        let sigma = problem.volatility(times[k]);
        let prev = &grid[k];
        let mut next = vec![0.0; count * d];
        next.par_chunks_mut(d).zip(prev.par_chunks(d)).enumerate().for_each(|(i, (out, x))| {
            problem.drift(times[k], x, &nominal[k], out);
            let mut z = vec![0.0; d];
            fill_normal(&mut stream(config.seed, Domain::ForwardGrid, k + 1, i), &mut z);
            let noise = &sigma * DVector::from_vec(z);
            for j in 0..d {
                out[j] = x[j] + out[j] * dt + noise[j] * sq_dt;
            }
        });
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                context: format!("forward grid at step {}", k + 1),
                detail: "non-finite particle".into(),
            });
        }
        grid.push(next);
    }
    let grid_size = grid.iter().map(Vec::len).sum::<usize>();

    let mut costs: Vec<f64> = grid[n].par_chunks(d).map(|x| problem.terminal_cost(x)).collect();
    let mut peak = grid_size + costs.len();
    let mut values: Vec<Option<PolynomialModel>> = vec![None; n];
    let mut diagnostics: Vec<Option<StepDiagnostics>> = vec![None; n];
    let mut next_model: Option<PolynomialModel> = None;
    for k in (0..n).rev() {
        let clock = Instant::now();
        let t1 = times[k + 1];
        let at = |e: Error| e.at_step(k);
        let states = &grid[k + 1];
        let fb = feedback(problem, t1, states, next_model.as_ref()).map_err(at)?;
        let b_nom: Vec<f64> = {
            let mut out = vec![0.0; states.len()];
            out.par_chunks_mut(d)
                .zip(states.par_chunks(d))
                .for_each(|(o, x)| problem.drift(t1, x, &nominal[k + 1], o));
            out
        };
        let targets: Vec<f64> = (0..count)
            .into_par_iter()
            .map(|i| {
                let x = &states[i * d..(i + 1) * d];
                let mut pairing = 0.0;
                for j in 0..d {
                    pairing += (fb.drifts[i * d + j] - b_nom[i * d + j]) * fb.grads[i * d + j];
                }
                costs[i] + (problem.running_cost(t1, x, &fb.actions[i]) + pairing) * dt
            })
            .collect();
        let live = grid_size + costs.len() + fb.footprint() + b_nom.len() + targets.len();
        peak = peak.max(live);
        let (model, fit) = if is_degenerate(&grid[k], d) {
            constant_shift(problem, next_model.as_ref(), config.degree, &grid[k][..d], &targets)
        } else {
            fit_value_with_diagnostics(&grid[k], d, &targets, config.degree).map_err(at)?
        };
        let (mean, cov) = empirical_moments(&grid[k], d);
        let drift_residual = drift_gap(&fb.drifts, &b_nom, d);
        let zero_drift_residual = fb.drifts.iter().map(|v| v * v).sum::<f64>() / count as f64;
        diagnostics[k] = Some(StepDiagnostics {
            k,
            t: times[k],
            mean: mean.iter().copied().collect(),
            cov_eigenvalues: SymmetricMatrix::from_matrix(cov).eigenvalues().map_err(at)?,
            value_residual: fit.residual,
            design_condition: fit.condition,
            design_rank: fit.rank,
            drift_residual,
            zero_drift_residual,
            projected: false,
            repeat_projection: false,
            regularized: false,
            particle_memory: live,
            wall_time_s: clock.elapsed().as_secs_f64(),
        });
        costs = targets;
        values[k] = Some(model.clone());
        next_model = Some(model);
    }

    Ok(SolverOutput {
        scheme: Scheme::Forward,
        dim: d,
        degree: config.degree,
        horizon,
        steps: n,
        values: values.into_iter().map(Option::unwrap).collect(),
        drifts: Vec::new(),
        gaussians: Vec::new(),
        diagnostics: diagnostics.into_iter().map(Option::unwrap).collect(),
        peak_particle_memory: peak,
    })
}

fn drift_gap(b: &[f64], b_nom: &[f64], d: usize) -> f64 {
    b.iter().zip(b_nom).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / (b.len() / d) as f64
}

fn is_degenerate(states: &[f64], d: usize) -> bool {
    let first = &states[..d];
    states.chunks(d).all(|x| x == first)
}

/// With every path at the same point the regression only identifies a
/// level: keep the shape of `v_{k+1}` and match the mean target at `x0`.
fn constant_shift(
    problem: &dyn ControlProblem,
    next: Option<&PolynomialModel>,
    degree: u32,
    x0: &[f64],
    targets: &[f64],
) -> (PolynomialModel, FitDiagnostics) {
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let residual = targets.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / targets.len() as f64;
    let model = match next {
        Some(m) => m.shifted(mean - m.eval(x0)),
        None => {
            let d = problem.dim();
            let mut coefficients = vec![0.0; basis_size(d, degree).expect("validated degree")];
            coefficients[0] = mean;
            PolynomialModel::new(d, degree, coefficients).expect("valid constant model")
        }
    };
    (
        model,
        FitDiagnostics {
            residual,
            condition: f64::INFINITY,
            rank: 1,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::HeatProblem;
    use crate::tcl::{ClusterParams, TclProblem};

    fn toy_cluster() -> ClusterParams {
        ClusterParams {
            theta: vec![0.5, 0.8],
            kappa: vec![2.5, 2.5],
            p_max: vec![2.0, 1.0],
            sigma: vec![0.5, 0.3],
            x_out: vec![27.0, 27.0],
            x_target: vec![24.0, 22.0],
            x_min: vec![22.5, 20.5],
            x_max: vec![25.5, 23.5],
            gamma: vec![1.0, 1.0],
            eta: vec![1.0, 1.0],
            loads: vec![20, 20],
            lambda: 20.0,
        }
    }

    #[test]
    fn heat_semigroup_from_a_spread_start() {
        let p = HeatProblem::new(2, 1.0, 0.1);
        let cfg = ForwardConfig {
            steps: 10,
            particles: 10_000,
            degree: 2,
            seed: 4,
            initial: GaussianState::new(DVector::zeros(2), SymmetricMatrix::identity(2).scaled(0.9)).unwrap(),
            nominal_control: Arc::new(|_| vec![0.0]),
        };
        let out = solve_forward(&p, &cfg).unwrap();
        let exact = [0.2, 0.0, 0.0, 1.0, 0.0, 1.0];
        for (c, e) in out.values[0].coefficients().iter().zip(exact) {
            assert!((c - e).abs() <= 0.05, "{c} vs {e}");
        }
        assert!(out.drifts.is_empty() && out.gaussians.is_empty());
    }

    #[test]
    fn grid_marginals_follow_the_ou_flow() {
        let params = toy_cluster();
        let problem = TclProblem::new(params.clone(), vec![0.3; 61], 1.0).unwrap();
        let duty = vec![0.4, 0.7];
        let nominal = duty.clone();
        let x0 = [26.0, 25.0];
        let cfg = ForwardConfig::from_point(60, 20_000, 2, 8, &x0, Arc::new(move |_| nominal.clone()));
        // moments are reported in the diagnostics of each step
        let out = solve_forward(&problem, &cfg).unwrap();
        let n = cfg.particles as f64;
        for s in out.diagnostics.iter().skip(1) {
            for i in 0..2 {
                let th = params.theta[i];
                let rest = params.x_out[i] - params.kappa[i] * params.p_max[i] * duty[i] / th;
                let m = rest + (x0[i] - rest) * (-th * s.t).exp();
                let q = params.sigma[i].powi(2) * (1.0 - (-2.0 * th * s.t).exp()) / (2.0 * th);
                assert!((s.mean[i] - m).abs() <= 5.0 * (q / n).sqrt(), "k={} mean {} vs {m}", s.k, s.mean[i]);
            }
            // eigenvalues of a diagonal covariance are its variances
            let mut q: Vec<f64> = (0..2)
                .map(|i| {
                    let th = params.theta[i];
                    params.sigma[i].powi(2) * (1.0 - (-2.0 * th * s.t).exp()) / (2.0 * th)
                })
                .collect();
            q.sort_by(f64::total_cmp);
            for (e, v) in s.cov_eigenvalues.iter().zip(&q) {
                assert!((e - v).abs() <= 5.0 * v * (2.0 / n).sqrt() + 1e-3 * v, "k={} var {e} vs {v}", s.k);
            }
        }
    }

    #[test]
    fn whole_grid_is_stored() {
        let problem = TclProblem::new(toy_cluster(), vec![0.3; 61], 1.0).unwrap();
        let run = |steps| {
            let cfg = ForwardConfig::from_point(steps, 500, 2, 0, &[24.0, 22.0], Arc::new(|_| vec![0.5, 0.5]));
            solve_forward(&problem, &cfg).unwrap().peak_particle_memory
        };
        let (a, b) = (run(10), run(40));
        assert!(a >= 11 * 500 * 2);
        assert!(b >= 41 * 500 * 2);
        assert_eq!(b - a, 30 * 500 * 2);
    }

    #[test]
    fn deterministic_start_and_reproducibility() {
        let problem = TclProblem::new(toy_cluster(), vec![0.3; 61], 1.0).unwrap();
        let cfg = ForwardConfig::from_point(60, 300, 2, 1, &[24.0, 22.0], Arc::new(|_| vec![0.5, 0.5]));
        let a = solve_forward(&problem, &cfg).unwrap();
        let b = solve_forward(&problem, &cfg).unwrap();
        assert_eq!(a.values, b.values);
        assert!(a.values[0].coefficients().iter().all(|c| c.is_finite()));
        // k = 0 has one distinct point: v_0 is v_1 shifted
        let diff: Vec<f64> = a.values[0].coefficients().iter().zip(a.values[1].coefficients()).map(|(u, v)| u - v).collect();
        assert!(diff[1..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn nominal_control_outside_the_box_is_rejected() {
        let problem = TclProblem::new(toy_cluster(), vec![0.3; 61], 1.0).unwrap();
        let cfg = ForwardConfig::from_point(10, 300, 2, 1, &[24.0, 22.0], Arc::new(|_| vec![1.5, 0.5]));
        assert!(matches!(solve_forward(&problem, &cfg), Err(Error::Config(_))));
    }
}
