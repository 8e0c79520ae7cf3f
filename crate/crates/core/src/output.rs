//! Results shared by the backward and forward solvers.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::{Error, Result};
use crate::gaussian_flow::GaussianState;
use crate::problem::ControlProblem;
use crate::regression::{AffineDrift, PolynomialModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Backward,
    Forward,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Backward => "backward",
            Scheme::Forward => "forward",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What happened while building the value model at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub k: usize,
    pub t: f64,
    /// Grid mean at `t_k` (Gaussian flow for the backward scheme, empirical
    /// for the forward one).
    pub mean: Vec<f64>,
    /// Ascending eigenvalues of the grid covariance at `t_k`.
    pub cov_eigenvalues: Vec<f64>,
    /// Mean squared residual of the value regression.
    pub value_residual: f64,
    /// Condition number of the regression design.
    pub design_condition: f64,
    pub design_rank: usize,
    /// Mean squared residual of the fitted drift, `(1/N) Σ |e|²`.
    pub drift_residual: f64,
    /// Same residual for the zero drift, `(1/N) Σ |b|²`.
    pub zero_drift_residual: f64,
    /// The covariance update left the PSD cone and was projected.
    pub projected: bool,
    /// The covariance was still indefinite after regeneration.
    pub repeat_projection: bool,
    /// The covariance was regularized before solving for the correction drift.
    pub regularized: bool,
    /// Particle values (f64 count) alive at the busiest point of the step.
    pub particle_memory: usize,
    pub wall_time_s: f64,
}

/// Value models, drifts and grid laws for every step.
#[derive(Debug, Clone)]
pub struct SolverOutput {
    pub scheme: Scheme,
    pub dim: usize,
    pub degree: u32,
    pub horizon: f64,
    pub steps: usize,
    /// `values[k]` is `v_k` for `k < n`; `v_n` is the terminal cost itself.
    pub values: Vec<PolynomialModel>,
    /// `drifts[k]` is the drift used on `(t_k, t_{k+1}]`. Empty for the
    /// forward scheme.
    pub drifts: Vec<AffineDrift>,
    /// `gaussians[k]` is the grid law at `t_k`, `k = 0..=n`. Empty for the
    /// forward scheme.
    pub gaussians: Vec<GaussianState>,
    /// `diagnostics[k]` describes the fit of `v_k`.
    pub diagnostics: Vec<StepDiagnostics>,
    /// Peak particle storage over the run, in f64 values.
    pub peak_particle_memory: usize,
}

impl SolverOutput {
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k > self.steps {
            Err(Error::InvalidInput(format!("step {k} beyond the horizon ({} steps)", self.steps)))
        } else {
            Ok(())
        }
    }

    /// `v_k(x)`; at `k = n` the terminal cost.
    pub fn value(&self, problem: &dyn ControlProblem, k: usize, x: &[f64]) -> Result<f64> {
        self.check_step(k)?;
        Ok(if k == self.steps {
            problem.terminal_cost(x)
        } else {
            self.values[k].eval(x)
        })
    }

    /// `∇v_k(x)`; at `k = n` the terminal gradient.
    pub fn gradient_into(&self, problem: &dyn ControlProblem, k: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_step(k)?;
        if k == self.steps {
            problem.terminal_gradient(x, out);
        } else {
            self.values[k].gradient_into(x, out);
        }
        Ok(())
    }

    /// Model records, one block per step, `v_n` written as `terminal`.
    pub fn write_models<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "scheme={} d={} p={} steps={} horizon={:.16e}",
            self.scheme, self.dim, self.degree, self.steps, self.horizon
        )?;
        for (k, m) in self.values.iter().enumerate() {
            writeln!(w, "step {k} t={:.16e}", self.time(k))?;
            w.write_all(m.to_record().as_bytes())?;
        }
        writeln!(w, "step {} t={:.16e}", self.steps, self.horizon)?;
        writeln!(w, "terminal")?;
        Ok(())
    }

    /// Per-step diagnostics as CSV. Wall time is only included on request
    /// so that reruns stay byte-identical.
    pub fn write_diagnostics<W: Write>(&self, w: W, include_timing: bool) -> Result<()> {
        let d = self.dim;
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["k".to_string(), "t".to_string()];
        header.extend((0..d).map(|i| format!("mean_{i}")));
        header.extend((0..d).map(|i| format!("cov_eig_{i}")));
        header.extend(
            [
                "value_residual",
                "design_condition",
                "design_rank",
                "drift_residual",
                "zero_drift_residual",
                "projected",
                "repeat_projection",
                "regularized",
                "particle_memory",
            ]
            .map(String::from),
        );
        if include_timing {
            header.push("wall_time_s".into());
        }
        out.write_record(&header)?;
        for s in &self.diagnostics {
            let mut row = vec![s.k.to_string(), fmt(s.t)];
            row.extend(s.mean.iter().map(|v| fmt(*v)));
            row.extend(s.cov_eigenvalues.iter().map(|v| fmt(*v)));
            row.extend([
                fmt(s.value_residual),
                fmt(s.design_condition),
                s.design_rank.to_string(),
                fmt(s.drift_residual),
                fmt(s.zero_drift_residual),
                (s.projected as u8).to_string(),
                (s.repeat_projection as u8).to_string(),
                (s.regularized as u8).to_string(),
                s.particle_memory.to_string(),
            ]);
            if include_timing {
                row.push(fmt(s.wall_time_s));
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Gaussian grid laws, one line per instant: `k`, mean, then the
    /// covariance row by row.
    pub fn gaussians_text(&self) -> String {
        let mut s = String::new();
        for (k, g) in self.gaussians.iter().enumerate() {
            let _ = write!(s, "{k}");
            for v in g.mean.iter().chain(g.cov.as_matrix().transpose().iter()) {
                let _ = write!(s, " {v:.16e}");
            }
            s.push('\n');
        }
        s
    }
}

pub(crate) fn fmt(v: f64) -> String {
    format!("{v:.10e}")
}
