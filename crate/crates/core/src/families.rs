//! Reference problems with closed-form value functions.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::problem::{ActionSet, ControlProblem};

/// Scalar linear-quadratic problem: `dX = a dt + σ dW`, running cost `a²`,
/// terminal cost `x²`, actions in `[-bound, bound]`.
///
/// While the optimal action stays inside the box the value function is
/// `P(t) x² + r(t)` with `P(t) = 1 / (1 + T - t)` and
/// `r(t) = σ² ln(1 + T - t)`.
#[derive(Debug, Clone)]
pub struct LqrProblem {
    sigma: f64,
    horizon: f64,
    actions: ActionSet,
}

impl LqrProblem {
    pub fn new(sigma: f64, horizon: f64, bound: f64) -> Result<Self> {
        let actions = ActionSet::Box {
            lower: vec![-bound],
            upper: vec![bound],
        };
        actions.validate()?;
        Ok(LqrProblem { sigma, horizon, actions })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn riccati_p(&self, t: f64) -> f64 {
        1.0 / (1.0 + self.horizon - t)
    }

    pub fn riccati_r(&self, t: f64) -> f64 {
        self.sigma * self.sigma * (1.0 + self.horizon - t).ln()
    }

    /// Exact value `P(t) x² + r(t)`.
    pub fn value(&self, t: f64, x: f64) -> f64 {
        self.riccati_p(t) * x * x + self.riccati_r(t)
    }

    /// Same problem with the noise switched off.
    pub fn deterministic(&self) -> Self {
        LqrProblem {
            sigma: 0.0,
            ..self.clone()
        }
    }
}

impl ControlProblem for LqrProblem {
    fn dim(&self) -> usize {
        1
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn drift(&self, _t: f64, _x: &[f64], a: &[f64], out: &mut [f64]) {
        out[0] = a[0];
    }

    fn running_cost(&self, _t: f64, _x: &[f64], a: &[f64]) -> f64 {
        a[0] * a[0]
    }

    fn terminal_cost(&self, x: &[f64]) -> f64 {
        x[0] * x[0]
    }

    fn terminal_gradient(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 2.0 * x[0];
    }

    fn volatility(&self, _t: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.sigma)
    }

    fn action_set(&self) -> &ActionSet {
        &self.actions
    }

    fn argmin_oracle(&self, _t: f64, _x: &[f64], delta: &[f64]) -> Option<Result<Vec<f64>>> {
        let ActionSet::Box { lower, upper } = &self.actions else {
            unreachable!()
        };
        Some(Ok(vec![(-delta[0] / 2.0).clamp(lower[0], upper[0])]))
    }
}

/// Uncontrolled problem: the only action is 0, there is no drift and no
/// running cost, `g(x) = |x|²` and `σ = s I`. Its value is
/// `|x|² + d s² (T - t)`.
#[derive(Debug, Clone)]
pub struct HeatProblem {
    dim: usize,
    scale: f64,
    horizon: f64,
    actions: ActionSet,
}

impl HeatProblem {
    pub fn new(dim: usize, scale: f64, horizon: f64) -> Self {
        HeatProblem {
            dim,
            scale,
            horizon,
            actions: ActionSet::Finite(vec![vec![0.0]]),
        }
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>() + self.dim as f64 * self.scale * self.scale * (self.horizon - t)
    }
}

impl ControlProblem for HeatProblem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn drift(&self, _t: f64, _x: &[f64], _a: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn running_cost(&self, _t: f64, _x: &[f64], _a: &[f64]) -> f64 {
        0.0
    }

    fn terminal_cost(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    fn terminal_gradient(&self, x: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = 2.0 * v;
        }
    }

    fn volatility(&self, _t: f64) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim) * self.scale
    }

    fn action_set(&self) -> &ActionSet {
        &self.actions
    }
}
