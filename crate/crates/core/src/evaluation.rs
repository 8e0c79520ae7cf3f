//! Policy rollouts and the replicate-level cost estimators.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::output::{Scheme, SolverOutput};
use crate::problem::{hamiltonian_argmin, ControlProblem};
use crate::rng::{fill_normal, stream, Domain};

/// Simulates `paths` trajectories from `x0` under the feedback
/// `α_k(x) = argmin H(t_k, x, ∇v_k(x))` and returns their realized costs
/// `Σ f(t_k, X_k, α_k) δt + g(X_T)`.
///
/// Path `j` draws its noise from evaluation stream `j` of `seed`, so two
/// solver outputs rolled out with the same seed see the same noise.
pub fn rollout_policy(problem: &dyn ControlProblem, output: &SolverOutput, x0: &[f64], paths: usize, seed: u64) -> Result<Vec<f64>> {
    let d = problem.dim();
    if x0.len() != d || output.dim != d {
        return Err(Error::InvalidInput("initial state, solver output and problem disagree in dimension".into()));
    }
    if output.values.len() != output.steps {
        return Err(Error::InvalidInput("solver output does not cover every step".into()));
    }
    let n = output.steps;
    let dt = output.dt();
    let sq_dt = dt.sqrt();
    let sigmas: Vec<_> = (0..n).map(|k| problem.volatility(output.time(k))).collect();
    (0..paths)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream(seed, Domain::Evaluation, 0, j);
            let mut x = x0.to_vec();
            let mut grad = vec![0.0; d];
            let mut b = vec![0.0; d];
            let mut z = vec![0.0; d];
            let mut cost = 0.0;
            for k in 0..n {
                let t = output.time(k);
                output.values[k].gradient_into(&x, &mut grad);
                let a = hamiltonian_argmin(problem, t, &x, &grad).map_err(|e| e.at_step(k))?;
                cost += problem.running_cost(t, &x, &a) * dt;
                problem.drift(t, &x, &a, &mut b);
                fill_normal(&mut rng, &mut z);
                let noise = &sigmas[k] * DVector::from_column_slice(&z);
                for i in 0..d {
                    x[i] += b[i] * dt + noise[i] * sq_dt;
                }
            }
            let total = cost + problem.terminal_cost(&x);
            if total.is_finite() {
                Ok(total)
            } else {
                Err(Error::Numerical {
                    context: format!("rollout path {j}"),
                    detail: "non-finite cost".into(),
                })
            }
        })
        .collect()
}

/// Grand mean `Ĵ` of the replicate-by-path cost matrix and the standard
/// deviation `σ̂` of that mean: the within-replicate variance (divisor
/// `M - 1`) averaged over replicates and divided by `M N_grid`, plus the
/// variance of the replicate means (divisor `N_grid - 1`) divided by
/// `N_grid`.
pub fn estimate_j(costs: &[Vec<f64>]) -> Result<(f64, f64)> {
    let rows = costs.len();
    let cols = costs.first().map_or(0, Vec::len);
    if rows < 2 || cols < 2 {
        return Err(Error::InvalidInput(format!("cost matrix must be at least 2x2, got {rows}x{cols}")));
    }
    if costs.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidInput("cost matrix rows differ in length".into()));
    }
    if costs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite cost".into()));
    }
    let (g, m) = (rows as f64, cols as f64);
    let means: Vec<f64> = costs.iter().map(|r| r.iter().sum::<f64>() / m).collect();
    let j_hat = means.iter().sum::<f64>() / g;
    let within = costs
        .iter()
        .zip(&means)
        .map(|(r, mu)| r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (m - 1.0))
        .sum::<f64>()
        / g;
    let between = means.iter().map(|mu| (mu - j_hat).powi(2)).sum::<f64>() / (g - 1.0);
    let var = within / (m * g) + between / g;
    Ok((j_hat, var.max(0.0).sqrt()))
}

/// Result of evaluating `N_grid` independent solver runs on `M` shared paths.
#[derive(Debug, Clone)]
pub struct EvaluationReport {
    pub scheme: Scheme,
    pub dim: usize,
    pub particles: usize,
    pub replicates: usize,
    pub paths: usize,
    pub grid_seeds: Vec<u64>,
    pub evaluation_seed: u64,
    pub j_hat: f64,
    pub sigma_hat: f64,
    /// `costs[r][j]`: replicate `r`, path `j`.
    pub costs: Vec<Vec<f64>>,
    pub peak_particle_memory: usize,
    pub wall_time_s: f64,
}

impl EvaluationReport {
    pub fn from_costs(
        scheme: Scheme,
        dim: usize,
        particles: usize,
        grid_seeds: Vec<u64>,
        evaluation_seed: u64,
        costs: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let (j_hat, sigma_hat) = estimate_j(&costs)?;
        Ok(EvaluationReport {
            scheme,
            dim,
            particles,
            replicates: costs.len(),
            paths: costs[0].len(),
            grid_seeds,
            evaluation_seed,
            j_hat,
            sigma_hat,
            costs,
            peak_particle_memory: 0,
            wall_time_s: 0.0,
        })
    }
}

/// Solves `replicates` times (grid seed `base_seed + r`) and rolls each
/// solution out on the same `paths` evaluation paths.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_replicates<S>(
    problem: &dyn ControlProblem,
    scheme: Scheme,
    particles: usize,
    x0: &[f64],
    replicates: usize,
    paths: usize,
    base_seed: u64,
    evaluation_seed: u64,
    solve: S,
) -> Result<EvaluationReport>
where
    S: Fn(u64) -> Result<SolverOutput>,
{
    let clock = std::time::Instant::now();
    let mut costs = Vec::with_capacity(replicates);
    let mut seeds = Vec::with_capacity(replicates);
    let mut peak = 0;
    for r in 0..replicates {
        let seed = base_seed.wrapping_add(r as u64);
        let out = solve(seed)?;
        peak = peak.max(out.peak_particle_memory);
        costs.push(rollout_policy(problem, &out, x0, paths, evaluation_seed)?);
        seeds.push(seed);
    }
    let mut report = EvaluationReport::from_costs(scheme, problem.dim(), particles, seeds, evaluation_seed, costs)?;
    report.peak_particle_memory = peak;
    report.wall_time_s = clock.elapsed().as_secs_f64();
    Ok(report)
}
