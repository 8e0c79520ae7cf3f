//! Thermostatically controlled loads: a population of air-conditioners
//! aggregated into `d` clusters, steered by a central controller that sets
//! the fraction of devices ON in each cluster.
//!
//! Time is measured in hours; the benchmark horizon is one hour split into
//! 60 one-minute steps.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{ActionSet, ControlProblem};
use crate::rng::{stream, Domain};

const QP_TOL: f64 = 1e-10;
const QP_MAX_SWEEPS: usize = 10_000;

/// Amplitude of the sinusoidal deviation added to the nominal profile.
pub const DEVIATION_AMPLITUDE: f64 = 0.20;

/// Intervals and fixed values used to draw a population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamRanges {
    pub theta: (f64, f64),
    pub p_max: (f64, f64),
    pub x_target: (f64, f64),
    pub gamma: (f64, f64),
    pub kappa: f64,
    pub sigma: f64,
    pub x_out: f64,
    pub eta: f64,
    pub lambda: f64,
    /// `x_min = x̄ - half_width`, `x_max = x̄ + half_width`.
    pub comfort_half_width: f64,
    pub loads_per_cluster: usize,
    /// Time grid of the profiles; taken from the run, not from the ranges file.
    #[serde(skip)]
    pub horizon: f64,
    #[serde(skip)]
    pub steps: usize,
}

impl Default for ParamRanges {
    fn default() -> Self {
        ParamRanges {
            theta: (0.1, 0.97),
            p_max: (0.5, 5.0),
            x_target: (16.0, 27.0),
            gamma: (0.5, 1.5),
            kappa: 2.5,
            sigma: 0.1,
            x_out: 27.0,
            eta: 1.0,
            lambda: 20.0,
            comfort_half_width: 1.5,
            loads_per_cluster: 20,
            horizon: 1.0,
            steps: 60,
        }
    }
}

impl ParamRanges {
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if ![self.theta, self.p_max, self.x_target, self.gamma].into_iter().all(ordered) {
            return Err(Error::Config("parameter ranges must be finite with lo <= hi".into()));
        }
        if !(self.theta.0 > 0.0 && self.p_max.0 > 0.0 && self.kappa > 0.0 && self.sigma > 0.0 && self.gamma.0 > 0.0) {
            return Err(Error::Config("theta, p_max, kappa, sigma and gamma must be positive".into()));
        }
        if !(self.comfort_half_width > 0.0 && self.eta >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::Config("comfort half width must be positive, eta and lambda non-negative".into()));
        }
        if self.loads_per_cluster == 0 || self.steps == 0 || !(self.horizon > 0.0) {
            return Err(Error::Config("loads per cluster, steps and horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Parameters of a `d`-cluster population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub theta: Vec<f64>,
    pub kappa: Vec<f64>,
    pub p_max: Vec<f64>,
    /// Volatility of the cluster-average temperature.
    pub sigma: Vec<f64>,
    pub x_out: Vec<f64>,
    pub x_target: Vec<f64>,
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub gamma: Vec<f64>,
    pub eta: Vec<f64>,
    pub loads: Vec<usize>,
    pub lambda: f64,
}

/// One air-conditioner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadParams {
    pub theta: f64,
    pub kappa: f64,
    pub p_max: f64,
    pub sigma: f64,
    pub x_out: f64,
    pub x_min: f64,
    pub x_max: f64,
}

impl ClusterParams {
    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// Share of each cluster in the total installed power.
    pub fn rho(&self) -> Vec<f64> {
        let total: f64 = self.loads.iter().zip(&self.p_max).map(|(n, p)| *n as f64 * p).sum();
        self.loads.iter().zip(&self.p_max).map(|(n, p)| *n as f64 * p / total).collect()
    }

    pub fn total_power(&self) -> f64 {
        self.loads.iter().zip(&self.p_max).map(|(n, p)| *n as f64 * p).sum()
    }

    /// Stationary duty cycle `θ (x_out - x̄) / (κ P_max)` clipped to [0, 1].
    pub fn duty_cycle(&self, i: usize) -> f64 {
        (self.theta[i] * (self.x_out[i] - self.x_target[i]) / (self.kappa[i] * self.p_max[i])).clamp(0.0, 1.0)
    }

    /// Single load of cluster `i`. Its noise is scaled so that the average
    /// of the cluster's independent loads has volatility `sigma[i]`.
    pub fn load(&self, i: usize) -> LoadParams {
        LoadParams {
            theta: self.theta[i],
            kappa: self.kappa[i],
            p_max: self.p_max[i],
            sigma: self.sigma[i] * (self.loads[i] as f64).sqrt(),
            x_out: self.x_out[i],
            x_min: self.x_min[i],
            x_max: self.x_max[i],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let lens = [
            self.kappa.len(),
            self.p_max.len(),
            self.sigma.len(),
            self.x_out.len(),
            self.x_target.len(),
            self.x_min.len(),
            self.x_max.len(),
            self.gamma.len(),
            self.eta.len(),
            self.loads.len(),
        ];
        if d == 0 || lens.iter().any(|&l| l != d) {
            return Err(Error::InvalidInput("cluster parameter vectors must share a positive length".into()));
        }
        for i in 0..d {
            if !(self.theta[i] > 0.0 && self.kappa[i] > 0.0 && self.p_max[i] > 0.0 && self.sigma[i] > 0.0) {
                return Err(Error::InvalidInput(format!("cluster {i}: theta, kappa, p_max, sigma must be positive")));
            }
            if !(self.x_min[i] < self.x_target[i] && self.x_target[i] < self.x_max[i]) {
                return Err(Error::InvalidInput(format!("cluster {i}: need x_min < x_target < x_max")));
            }
            if self.loads[i] == 0 || !(self.gamma[i] > 0.0) || self.eta[i] < 0.0 {
                return Err(Error::InvalidInput(format!("cluster {i}: invalid gamma, eta or load count")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("cluster parameters serialize")
    }
}

/// Draws every ranged parameter i.i.d. uniform on its interval.
pub fn sample_population<R: Rng + ?Sized>(ranges: &ParamRanges, d: usize, rng: &mut R) -> Result<ClusterParams> {
    if d == 0 {
        return Err(Error::Config("population needs at least one cluster".into()));
    }
    ranges.validate()?;
    let mut uniform = |(lo, hi): (f64, f64)| if lo == hi { lo } else { lo + (hi - lo) * rng.random::<f64>() };
    let mut theta = Vec::with_capacity(d);
    let mut p_max = Vec::with_capacity(d);
    let mut x_target = Vec::with_capacity(d);
    let mut gamma = Vec::with_capacity(d);
    for _ in 0..d {
        theta.push(uniform(ranges.theta));
        p_max.push(uniform(ranges.p_max));
        x_target.push(uniform(ranges.x_target));
        gamma.push(uniform(ranges.gamma));
    }
    let h = ranges.comfort_half_width;
    Ok(ClusterParams {
        x_min: x_target.iter().map(|x| x - h).collect(),
        x_max: x_target.iter().map(|x| x + h).collect(),
        theta,
        kappa: vec![ranges.kappa; d],
        p_max,
        sigma: vec![ranges.sigma; d],
        x_out: vec![ranges.x_out; d],
        x_target,
        gamma,
        eta: vec![ranges.eta; d],
        loads: vec![ranges.loads_per_cluster; d],
        lambda: ranges.lambda,
    })
}

/// Per-instant record of one load under the thermostat rule.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleTrace {
    pub temperature: Vec<f64>,
    pub on: Vec<bool>,
    /// Power drawn during the step starting at each instant.
    pub consumption: Vec<f64>,
}

/// Simulates one load under the thermostat rule: ON until the temperature
/// reaches `x_min`, then OFF until it reaches `x_max`. Switching is checked
/// at grid instants only. Returns `steps + 1` instants.
pub fn simulate_individual_cycle<R: Rng + ?Sized>(
    load: &LoadParams,
    x0: f64,
    on0: bool,
    steps: usize,
    dt: f64,
    rng: &mut R,
) -> CycleTrace {
    let mut x = x0;
    let mut on = on0;
    let mut trace = CycleTrace {
        temperature: Vec::with_capacity(steps + 1),
        on: Vec::with_capacity(steps + 1),
        consumption: Vec::with_capacity(steps + 1),
    };
    let sq = dt.sqrt();
    for k in 0..=steps {
        if on && x <= load.x_min {
            on = false;
        } else if !on && x >= load.x_max {
            on = true;
        }
        let a = if on { 1.0 } else { 0.0 };
        trace.temperature.push(x);
        trace.on.push(on);
        trace.consumption.push(a * load.p_max);
        if k < steps {
            let z: f64 = if load.sigma > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
            x += (-load.theta * (x - load.x_out) - load.kappa * load.p_max * a) * dt + load.sigma * sq * z;
        }
    }
    trace
}

/// Consumption of one population as a fraction of its installed power, per
/// grid instant. Initial temperatures are `N(x̄, 1)`, initial status a fair
/// coin.
pub fn population_consumption(params: &ClusterParams, steps: usize, dt: f64, seed: u64, draw: usize) -> Vec<f64> {
    let mut total = vec![0.0; steps + 1];
    let mut index = 0;
    for i in 0..params.dim() {
        let load = params.load(i);
        for _ in 0..params.loads[i] {
            let mut rng = stream(seed, Domain::LoadSimulation, draw, index);
            index += 1;
            let z: f64 = StandardNormal.sample(&mut rng);
            let on0 = rng.random::<bool>();
            let trace = simulate_individual_cycle(&load, params.x_target[i] + z, on0, steps, dt, &mut rng);
            for (t, c) in total.iter_mut().zip(&trace.consumption) {
                *t += c;
            }
        }
    }
    let cap = params.total_power();
    total.iter_mut().for_each(|v| *v /= cap);
    total
}

/// Nominal consumption profile: average over `draws` independently drawn
/// populations of their uncontrolled consumption fraction.
pub fn nominal_profile(ranges: &ParamRanges, d: usize, draws: usize, seed: u64) -> Result<Vec<f64>> {
    if draws == 0 {
        return Err(Error::Config("nominal profile needs at least one population draw".into()));
    }
    if d == 0 {
        return Err(Error::Config("population needs at least one cluster".into()));
    }
    ranges.validate()?;
    let steps = ranges.steps;
    let dt = ranges.dt();
    let per_draw: Vec<Vec<f64>> = (0..draws)
        .into_par_iter()
        .map(|draw| {
            let mut rng = stream(seed, Domain::Population, draw + 1, 0);
            let params = sample_population(ranges, d, &mut rng)?;
            Ok(population_consumption(&params, steps, dt, seed, draw))
        })
        .collect::<Result<_>>()?;
    let mut avg = vec![0.0; steps + 1];
    for p in &per_draw {
        for (a, v) in avg.iter_mut().zip(p) {
            *a += v;
        }
    }
    avg.iter_mut().for_each(|v| *v /= draws as f64);
    Ok(avg)
}

/// `r_k = r^nom_k + 0.2 sin(2π t_k / T)` on the grid `t_k = k T / n`.
pub fn target_profile(r_nom: &[f64], horizon: f64) -> Vec<f64> {
    let n = r_nom.len().saturating_sub(1).max(1);
    r_nom
        .iter()
        .enumerate()
        .map(|(k, r)| r + deviation(k as f64 * horizon / n as f64, horizon))
        .collect()
}

pub fn deviation(t: f64, horizon: f64) -> f64 {
    DEVIATION_AMPLITUDE * (2.0 * std::f64::consts::PI * t / horizon).sin()
}

/// Data of the per-instant box-constrained QP
/// `min_{a ∈ [0,1]^d} λ(ρᵀa - r)² + (1/d) Σ γ_i (ρ_i a_i)² - Σ κ_i P_i a_i δ_i`.
#[derive(Debug, Clone)]
pub struct TclQp<'a> {
    pub rho: &'a [f64],
    pub gamma: &'a [f64],
    /// `κ_i P_i` per cluster.
    pub heat: &'a [f64],
    pub lambda: f64,
    pub target: f64,
}

impl TclQp<'_> {
    pub fn objective(&self, a: &[f64], delta: &[f64]) -> f64 {
        let d = a.len() as f64;
        let s: f64 = self.rho.iter().zip(a).map(|(r, v)| r * v).sum();
        let mut v = self.lambda * (s - self.target).powi(2);
        for i in 0..a.len() {
            v += self.gamma[i] * (self.rho[i] * a[i]).powi(2) / d - self.heat[i] * a[i] * delta[i];
        }
        v
    }

    /// Cyclic coordinate descent with exact clipped scalar minimization.
    /// Returns the minimizer and the number of sweeps.
    pub fn solve(&self, delta: &[f64]) -> Result<(Vec<f64>, usize)> {
        let d = self.rho.len();
        let df = d as f64;
        let mut a = vec![0.0; d];
        let mut s = 0.0;
        #[cfg(debug_assertions)]
        let mut last = self.objective(&a, delta);
        for sweep in 1..=QP_MAX_SWEEPS {
            let mut max_change: f64 = 0.0;
            for i in 0..d {
                let r = self.rho[i];
                let rest = s - r * a[i];
                let quad = self.lambda * r * r + self.gamma[i] * r * r / df;
                let lin = 2.0 * self.lambda * r * (rest - self.target) - self.heat[i] * delta[i];
                let new = (-lin / (2.0 * quad)).clamp(0.0, 1.0);
                max_change = max_change.max((new - a[i]).abs());
                a[i] = new;
                s = rest + r * new;
            }
            #[cfg(debug_assertions)]
            {
                let now = self.objective(&a, delta);
                debug_assert!(now <= last + 1e-12 * last.abs().max(1.0), "coordinate descent increased the objective");
                last = now;
            }
            if max_change < QP_TOL {
                return Ok((a, sweep));
            }
        }
        Err(Error::Optimization {
            message: format!("coordinate descent exceeded {QP_MAX_SWEEPS} sweeps"),
            best: a,
        })
    }
}

/// The central controller's problem on the aggregated cluster temperatures.
#[derive(Debug, Clone)]
pub struct TclProblem {
    params: ClusterParams,
    rho: Vec<f64>,
    heat: Vec<f64>,
    target: Vec<f64>,
    horizon: f64,
    actions: ActionSet,
}

impl TclProblem {
    /// `target` holds the consumption target at the `n + 1` grid instants
    /// of `[0, horizon]`; it is linearly interpolated in between.
    pub fn new(params: ClusterParams, target: Vec<f64>, horizon: f64) -> Result<Self> {
        params.validate()?;
        if target.len() < 2 || target.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("target profile needs at least two finite samples".into()));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidInput("horizon must be positive".into()));
        }
        let d = params.dim();
        Ok(TclProblem {
            rho: params.rho(),
            heat: (0..d).map(|i| params.kappa[i] * params.p_max[i]).collect(),
            actions: ActionSet::unit_box(d),
            params,
            target,
            horizon,
        })
    }

    pub fn params(&self) -> &ClusterParams {
        &self.params
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn target_profile(&self) -> &[f64] {
        &self.target
    }

    pub fn target_at(&self, t: f64) -> f64 {
        let n = self.target.len() - 1;
        let u = (t / self.horizon * n as f64).clamp(0.0, n as f64);
        let k = (u.floor() as usize).min(n - 1);
        let w = u - k as f64;
        (1.0 - w) * self.target[k] + w * self.target[k + 1]
    }

    pub fn qp(&self, t: f64) -> TclQp<'_> {
        TclQp {
            rho: &self.rho,
            gamma: &self.params.gamma,
            heat: &self.heat,
            lambda: self.params.lambda,
            target: self.target_at(t),
        }
    }

    /// Stationary duty cycle of every cluster, used as the nominal control.
    pub fn nominal_control(&self) -> Vec<f64> {
        (0..self.params.dim()).map(|i| self.params.duty_cycle(i)).collect()
    }

    /// Initial state of the benchmark: every cluster at its target.
    pub fn initial_state(&self) -> Vec<f64> {
        self.params.x_target.clone()
    }
}

impl ControlProblem for TclProblem {
    fn dim(&self) -> usize {
        self.params.dim()
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn drift(&self, _t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        let p = &self.params;
        for i in 0..out.len() {
            out[i] = -p.theta[i] * (x[i] - p.x_out[i]) - self.heat[i] * a[i];
        }
    }

    fn running_cost(&self, t: f64, x: &[f64], a: &[f64]) -> f64 {
        let p = &self.params;
        let d = p.dim() as f64;
        let s: f64 = self.rho.iter().zip(a).map(|(r, v)| r * v).sum();
        let mut local = 0.0;
        for i in 0..x.len() {
            let above = (x[i] - p.x_max[i]).max(0.0);
            let below = (p.x_min[i] - x[i]).max(0.0);
            local += p.gamma[i] * (self.rho[i] * a[i]).powi(2) + p.eta[i] * (above * above + below * below);
        }
        p.lambda * (s - self.target_at(t)).powi(2) + local / d
    }

    fn terminal_cost(&self, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        x.iter().zip(&self.params.x_target).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / d
    }

    fn terminal_gradient(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len() as f64;
        for ((o, u), v) in out.iter_mut().zip(x).zip(&self.params.x_target) {
            *o = 2.0 * (u - v) / d;
        }
    }

    fn volatility(&self, _t: f64) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.params.sigma))
    }

    fn action_set(&self) -> &ActionSet {
        &self.actions
    }

    fn argmin_oracle(&self, t: f64, _x: &[f64], delta: &[f64]) -> Option<Result<Vec<f64>>> {
        Some(self.qp(t).solve(delta).map(|(a, _)| a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{hamiltonian_argmin, hamiltonian_objective};

    fn default_population(d: usize, seed: u64) -> ClusterParams {
        sample_population(&ParamRanges::default(), d, &mut stream(seed, Domain::Population, 0, 0)).unwrap()
    }

    fn flat_problem(params: ClusterParams, r: f64) -> TclProblem {
        TclProblem::new(params, vec![r; 61], 1.0).unwrap()
    }

    #[test]
    fn degenerate_ranges_are_deterministic() {
        let ranges = ParamRanges {
            theta: (0.5, 0.5),
            p_max: (2.0, 2.0),
            x_target: (20.0, 20.0),
            gamma: (1.0, 1.0),
            ..ParamRanges::default()
        };
        let a = sample_population(&ranges, 3, &mut stream(1, Domain::Population, 0, 0)).unwrap();
        let b = sample_population(&ranges, 3, &mut stream(2, Domain::Population, 0, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.theta, vec![0.5; 3]);
        assert_eq!(a.x_min, vec![18.5; 3]);
    }

    #[test]
    fn sampled_ranges_and_rho() {
        for seed in 0..20 {
            let p = default_population(20, seed);
            assert!(p.theta.iter().all(|t| (0.1..=0.97).contains(t)));
            assert!(p.p_max.iter().all(|t| (0.5..=5.0).contains(t)));
            assert!(p.x_target.iter().all(|t| (16.0..=27.0).contains(t)));
            assert!(p.gamma.iter().all(|t| (0.5..=1.5).contains(t)));
            let total: f64 = p.rho().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert_ne!(default_population(20, 1).theta, default_population(20, 2).theta);
        assert!(sample_population(&ParamRanges::default(), 0, &mut stream(0, Domain::Population, 0, 0)).is_err());
    }

    fn quiet_load() -> LoadParams {
        LoadParams {
            theta: 0.5,
            kappa: 2.5,
            p_max: 2.0,
            sigma: 0.0,
            x_out: 27.0,
            x_min: 19.5,
            x_max: 22.5,
        }
    }

    #[test]
    fn on_at_lower_threshold_switches_off() {
        let load = quiet_load();
        let mut rng = stream(0, Domain::Auxiliary, 0, 0);
        let tr = simulate_individual_cycle(&load, load.x_min, true, 30, 1.0 / 60.0, &mut rng);
        assert!(!tr.on[0]);
        assert_eq!(tr.consumption[0], 0.0);
        assert!(tr.temperature.windows(2).take(20).all(|w| w[1] > w[0]));
    }

    #[test]
    fn no_cooling_relaxes_to_outdoor() {
        let load = LoadParams {
            kappa: 0.0,
            x_max: 100.0,
            ..quiet_load()
        };
        let mut rng = stream(0, Domain::Auxiliary, 0, 0);
        let tr = simulate_individual_cycle(&load, 18.0, false, 2000, 0.01, &mut rng);
        assert!(tr.on.iter().all(|o| !o));
        assert!(tr.temperature.windows(2).all(|w| w[1] >= w[0] && w[1] <= 27.0));
        assert!((tr.temperature.last().unwrap() - 27.0).abs() < 1e-3);
    }

    #[test]
    fn long_run_duty_fraction_energy_balance() {
        // One load over many hours. In stationarity the mean Euler increment
        // vanishes: κ P E[α] = θ (x_out - E[x]).
        let params = default_population(1, 5);
        let load = params.load(0);
        let dt = 1.0 / 60.0;
        let runs = 10_000;
        let steps = 60 * 24;
        let burn = 60 * 4;
        let per_run: Vec<(f64, f64, f64)> = (0..runs)
            .into_par_iter()
            .map(|j| {
                let mut rng = stream(3, Domain::Auxiliary, 1, j);
                let tr = simulate_individual_cycle(&load, params.x_target[0], j % 2 == 0, steps, dt, &mut rng);
                let m = (steps - burn) as f64;
                let duty = tr.on[burn..steps].iter().filter(|o| **o).count() as f64 / m;
                let mean_x = tr.temperature[burn..steps].iter().sum::<f64>() / m;
                let drift = (tr.temperature[steps] - tr.temperature[burn]) / (m * dt);
                (duty, mean_x, drift)
            })
            .collect();
        let n = runs as f64;
        let duty: Vec<f64> = per_run.iter().map(|r| r.0).collect();
        let mean_duty = duty.iter().sum::<f64>() / n;
        let sd = (duty.iter().map(|v| (v - mean_duty).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let se = sd / n.sqrt();
        // discrete energy balance per run (noise increments average out)
        let predicted: f64 = per_run
            .iter()
            .map(|&(_, mx, dr)| (load.theta * (load.x_out - mx) - dr) / (load.kappa * load.p_max))
            .sum::<f64>()
            / n;
        let noise_se = load.sigma / (load.kappa * load.p_max) / (((steps - burn) as f64 * dt).sqrt() * n.sqrt());
        assert!(
            (mean_duty - predicted).abs() <= 5.0 * (se + noise_se),
            "duty {mean_duty} vs energy balance {predicted} (se {se})"
        );
        let nominal = params.duty_cycle(0);
        assert!((mean_duty - nominal).abs() <= 0.1 * nominal.max(0.05), "{mean_duty} vs {nominal}");
    }

    #[test]
    fn nominal_profile_cases() {
        let ranges = ParamRanges::default();
        let r = nominal_profile(&ranges, 2, 50, 9).unwrap();
        assert_eq!(r.len(), 61);
        assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(nominal_profile(&ranges, 2, 0, 9).is_err());
        assert!(nominal_profile(&ranges, 0, 1, 9).is_err());

        // targets at the outdoor temperature: loads barely need cooling
        let hot = ParamRanges {
            x_target: (27.0, 27.0),
            sigma: 1e-9,
            ..ParamRanges::default()
        };
        let r = nominal_profile(&hot, 1, 10, 2).unwrap();
        let late = r[30..].iter().sum::<f64>() / 31.0;
        assert!(late < 0.15 && late < r[0], "{late}");
    }

    #[test]
    fn single_deterministic_load_profile_is_its_duty_pattern() {
        let ranges = ParamRanges {
            theta: (0.5, 0.5),
            p_max: (2.0, 2.0),
            x_target: (21.0, 21.0),
            gamma: (1.0, 1.0),
            sigma: 1e-300,
            loads_per_cluster: 1,
            ..ParamRanges::default()
        };
        let seed = 4;
        let r = nominal_profile(&ranges, 1, 1, seed).unwrap();
        let params = sample_population(&ranges, 1, &mut stream(seed, Domain::Population, 1, 0)).unwrap();
        let mut rng = stream(seed, Domain::LoadSimulation, 0, 0);
        let z: f64 = StandardNormal.sample(&mut rng);
        let on0 = rng.random::<bool>();
        let tr = simulate_individual_cycle(&params.load(0), 21.0 + z, on0, 60, 1.0 / 60.0, &mut rng);
        let pattern: Vec<f64> = tr.on.iter().map(|o| if *o { 1.0 } else { 0.0 }).collect();
        assert_eq!(r, pattern);
    }

    #[test]
    fn target_deviation_points() {
        let r = target_profile(&[0.5; 61], 1.0);
        assert!((r[0] - 0.5).abs() < 1e-15);
        assert!((r[30] - 0.5).abs() < 1e-15);
        assert!((r[15] - 0.7).abs() < 1e-15);
        let dt = 1.0 / 60.0;
        let sum: f64 = (0..60).map(|k| deviation(k as f64 * dt, 1.0)).sum();
        assert!((sum * dt).abs() <= 1e-10);
    }

    #[test]
    fn scalar_qp_closed_form() {
        let p = default_population(1, 3);
        let prob = flat_problem(p.clone(), 0.3);
        let rho = prob.rho()[0];
        let expected = (p.lambda * rho * 0.3 / (p.lambda * rho * rho + p.gamma[0] * rho * rho)).clamp(0.0, 1.0);
        let a = hamiltonian_argmin(&prob, 0.0, &[20.0], &[0.0]).unwrap();
        assert!((a[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn strong_gradient_pushes_to_boundary() {
        let p = default_population(3, 4);
        let prob = flat_problem(p, 0.5);
        // δ ≫ 0: cooling (−κPa) lowers ⟨b, δ⟩, every cluster fully ON
        let a = hamiltonian_argmin(&prob, 0.0, &[20.0; 3], &[1e4; 3]).unwrap();
        assert_eq!(a, vec![1.0; 3]);
        // δ ≪ 0: ON is penalized, every cluster OFF
        let a = hamiltonian_argmin(&prob, 0.0, &[20.0; 3], &[-1e4; 3]).unwrap();
        assert_eq!(a, vec![0.0; 3]);
    }

    #[test]
    fn qp_matches_grid_search_in_two_dimensions() {
        for seed in 0..5 {
            let p = default_population(2, 10 + seed);
            let prob = flat_problem(p, 0.4);
            let mut rng = stream(seed, Domain::Auxiliary, 2, 0);
            let delta: Vec<f64> = (0..2).map(|_| 0.5 * (rng.random::<f64>() - 0.5)).collect();
            let a = hamiltonian_argmin(&prob, 0.0, &[20.0, 20.0], &delta).unwrap();
            let best = hamiltonian_objective(&prob, 0.0, &[20.0, 20.0], &a, &delta);
            let mut grid_best = f64::INFINITY;
            for i in 0..=1000 {
                for j in 0..=1000 {
                    let c = [i as f64 * 1e-3, j as f64 * 1e-3];
                    grid_best = grid_best.min(hamiltonian_objective(&prob, 0.0, &[20.0, 20.0], &c, &delta));
                }
            }
            assert!(best <= grid_best + 1e-12);
            assert!(grid_best - best <= 1e-5);
        }
    }

    #[test]
    fn costs_are_non_negative_and_consistent() {
        let p = default_population(4, 6);
        let prob = TclProblem::new(p.clone(), target_profile(&[0.4; 61], 1.0), 1.0).unwrap();
        let mut rng = stream(6, Domain::Auxiliary, 0, 0);
        for _ in 0..200 {
            let x: Vec<f64> = (0..4).map(|_| 10.0 + 20.0 * rng.random::<f64>()).collect();
            let a: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let t = rng.random::<f64>();
            assert!(prob.running_cost(t, &x, &a) >= 0.0);
            assert!(prob.terminal_cost(&x) >= 0.0);
            let r = prob.target_at(t);
            let mut pen = 0.0;
            for i in 0..4 {
                pen += p.eta[i] * ((x[i] - p.x_max[i]).max(0.0).powi(2) + (p.x_min[i] - x[i]).max(0.0).powi(2));
            }
            let at_zero = prob.running_cost(t, &x, &[0.0; 4]);
            assert!((at_zero - (p.lambda * r * r + pen / 4.0)).abs() < 1e-12);
            let a_out = hamiltonian_argmin(&prob, t, &x, &a).unwrap();
            assert!(a_out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn terminal_gradient_is_analytic() {
        let p = default_population(3, 7);
        let prob = flat_problem(p, 0.5);
        let x = [20.0, 21.5, 18.0];
        let mut g = [0.0; 3];
        prob.terminal_gradient(&x, &mut g);
        for k in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += 1e-6;
            xm[k] -= 1e-6;
            let fd = (prob.terminal_cost(&xp) - prob.terminal_cost(&xm)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-6);
        }
    }
}
