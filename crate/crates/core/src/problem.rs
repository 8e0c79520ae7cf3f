//! Controlled diffusion problems and the Hamiltonian minimization.
//!
//! A problem is the tuple `(b, f, g, σ, A)`:
//!
//! ```text
//! dX = b(t, X, α) dt + σ(t) dW,   cost = ∫ f(t, X, α) dt + g(X_T)
//! ```
//!
//! with actions in a compact set `A`. The Hamiltonian at `(t, x, δ)` is
//! `min_{a ∈ A} f(t, x, a) + ⟨b(t, x, a), δ⟩`.

use std::cmp::Ordering;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{condition_number, MAX_CONDITION};

const PG_MAX_ITERS: usize = 10_000;
const PG_MIN_DECREASE: f64 = 1e-12;

/// Admissible actions.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionSet {
    /// Axis-aligned box `lower <= a <= upper`.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// Finite list of actions.
    Finite(Vec<Vec<f64>>),
}

impl ActionSet {
    pub fn unit_box(dim: usize) -> Self {
        ActionSet::Box {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ActionSet::Box { lower, upper } => {
                if lower.len() != upper.len() || lower.is_empty() {
                    return Err(Error::InvalidInput("box bounds must be non-empty and of equal length".into()));
                }
                if lower.iter().zip(upper).any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite()) {
                    return Err(Error::InvalidInput("box bounds must be finite with lower <= upper".into()));
                }
            }
            ActionSet::Finite(list) => {
                let Some(first) = list.first() else {
                    return Err(Error::InvalidInput("finite action set is empty".into()));
                };
                if first.is_empty() || list.iter().any(|a| a.len() != first.len()) {
                    return Err(Error::InvalidInput("finite actions must share a positive dimension".into()));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            ActionSet::Box { lower, .. } => lower.len(),
            ActionSet::Finite(list) => list.first().map_or(0, Vec::len),
        }
    }

    /// Componentwise clipping onto a box; identity for finite sets.
    pub fn project(&self, a: &mut [f64]) {
        if let ActionSet::Box { lower, upper } = self {
            for ((v, l), u) in a.iter_mut().zip(lower).zip(upper) {
                *v = v.clamp(*l, *u);
            }
        }
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        match self {
            ActionSet::Box { lower, upper } => {
                a.len() == lower.len() && a.iter().zip(lower).zip(upper).all(|((v, l), u)| l <= v && v <= u)
            }
            ActionSet::Finite(list) => list.iter().any(|x| x.as_slice() == a),
        }
    }
}

/// A finite-horizon stochastic control problem.
pub trait ControlProblem: Send + Sync {
    /// State dimension `d`.
    fn dim(&self) -> usize;

    /// Horizon `T`.
    fn horizon(&self) -> f64;

    /// Writes `b(t, x, a)` into `out`.
    fn drift(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]);

    fn running_cost(&self, t: f64, x: &[f64], a: &[f64]) -> f64;

    fn terminal_cost(&self, x: &[f64]) -> f64;

    /// Writes `∇g(x)` into `out`.
    fn terminal_gradient(&self, x: &[f64], out: &mut [f64]);

    /// `σ(t)`, a `d x d` matrix.
    fn volatility(&self, t: f64) -> DMatrix<f64>;

    fn action_set(&self) -> &ActionSet;

    /// Problem-specific minimizer of `f + ⟨b, δ⟩`; `None` selects the
    /// generic fallback.
    fn argmin_oracle(&self, _t: f64, _x: &[f64], _delta: &[f64]) -> Option<Result<Vec<f64>>> {
        None
    }
}

/// Checks dimensions and invertibility of `σ(t)` on the given instants.
pub fn validate_problem(problem: &dyn ControlProblem, times: &[f64]) -> Result<()> {
    problem.action_set().validate()?;
    let d = problem.dim();
    if d == 0 {
        return Err(Error::InvalidInput("state dimension must be positive".into()));
    }
    if !(problem.horizon() > 0.0) {
        return Err(Error::InvalidInput("horizon must be positive".into()));
    }
    for &t in times {
        let s = problem.volatility(t);
        if s.shape() != (d, d) {
            return Err(Error::InvalidInput(format!("volatility at t={t} is not {d}x{d}")));
        }
        let cond = condition_number(&s);
        if !(cond <= MAX_CONDITION) {
            return Err(Error::InvalidInput(format!(
                "volatility at t={t} is not invertible (condition {cond:.3e})"
            )));
        }
    }
    Ok(())
}

/// `f(t, x, a) + ⟨b(t, x, a), δ⟩`.
pub fn hamiltonian_objective(problem: &dyn ControlProblem, t: f64, x: &[f64], a: &[f64], delta: &[f64]) -> f64 {
    let mut b = vec![0.0; problem.dim()];
    problem.drift(t, x, a, &mut b);
    problem.running_cost(t, x, a) + b.iter().zip(delta).map(|(u, v)| u * v).sum::<f64>()
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (u, v) in a.iter().zip(b) {
        match u.total_cmp(v) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Minimizer of `f + ⟨b, δ⟩` over the action set. Finite sets are
/// enumerated, ties going to the lexicographically smallest action; boxes
/// use the problem's oracle or projected gradient descent.
pub fn hamiltonian_argmin(problem: &dyn ControlProblem, t: f64, x: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite gradient in Hamiltonian".into()));
    }
    match problem.action_set() {
        ActionSet::Finite(list) => {
            let mut best: Option<(&Vec<f64>, f64)> = None;
            for a in list {
                let v = hamiltonian_objective(problem, t, x, a, delta);
                best = match best {
                    None => Some((a, v)),
                    Some((ba, bv)) if v < bv || (v == bv && lex_cmp(a, ba) == Ordering::Less) => Some((a, v)),
                    keep => keep,
                };
            }
            Ok(best.expect("validated non-empty").0.clone())
        }
        set @ ActionSet::Box { .. } => match problem.argmin_oracle(t, x, delta) {
            Some(r) => r,
            None => projected_gradient(problem, set, t, x, delta),
        },
    }
}

/// `H(t, x, δ)`.
pub fn hamiltonian_value(problem: &dyn ControlProblem, t: f64, x: &[f64], delta: &[f64]) -> Result<f64> {
    let a = hamiltonian_argmin(problem, t, x, delta)?;
    Ok(hamiltonian_objective(problem, t, x, &a, delta))
}

fn projected_gradient(problem: &dyn ControlProblem, set: &ActionSet, t: f64, x: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    let ActionSet::Box { lower, .. } = set else {
        unreachable!("projected gradient on a finite set")
    };
    let obj = |a: &[f64]| hamiltonian_objective(problem, t, x, a, delta);
    let k = lower.len();
    let mut a = lower.clone();
    let mut val = obj(&a);
    let mut step = 1.0;
    let mut grad = vec![0.0; k];
    let mut probe = vec![0.0; k];
    for _ in 0..PG_MAX_ITERS {
        let h = 1e-6 * (1.0 + a.iter().map(|v| v * v).sum::<f64>().sqrt());
        for i in 0..k {
            probe.copy_from_slice(&a);
            probe[i] = a[i] + h;
            let up = obj(&probe);
            probe[i] = a[i] - h;
            let down = obj(&probe);
            grad[i] = (up - down) / (2.0 * h);
        }
        if grad.iter().all(|g| *g == 0.0) {
            return Ok(a);
        }
        let mut accepted = None;
        while step > 1e-20 {
            for i in 0..k {
                probe[i] = a[i] - step * grad[i];
            }
            set.project(&mut probe);
            let v = obj(&probe);
            // Armijo condition along the projected step
            let slope: f64 = grad.iter().zip(probe.iter().zip(&a)).map(|(g, (p, q))| g * (p - q)).sum();
            if v < val && v <= val + 0.5 * slope {
                accepted = Some(v);
                break;
            }
            step *= 0.5;
        }
        let Some(v) = accepted else {
            // no descent along the projected gradient: stationary
            return Ok(a);
        };
        let decrease = val - v;
        a.copy_from_slice(&probe);
        val = v;
        if decrease < PG_MIN_DECREASE {
            return Ok(a);
        }
        step *= 2.0;
    }
    Err(Error::Optimization {
        message: format!("projected gradient exceeded {PG_MAX_ITERS} iterations"),
        best: a,
    })
}
