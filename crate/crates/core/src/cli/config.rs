use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tcl::ParamRanges;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Tcl,
    Lqr,
    Heat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeChoice {
    Backward,
    Forward,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub family: Family,
    pub dim: usize,
    #[serde(default = "one")]
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub steps: usize,
    pub particles: usize,
    #[serde(default = "two")]
    pub degree: u32,
    /// Terminal grid covariance `Q̄_n = terminal_cov · I`.
    #[serde(default = "one")]
    pub terminal_cov: f64,
    #[serde(default = "both")]
    pub scheme: SchemeChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub population: u64,
    pub grid: u64,
    pub evaluation: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            population: 1,
            grid: 100,
            evaluation: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    /// Independent solver runs `N_grid`.
    pub replicates: usize,
    /// Evaluation paths `M` per run.
    pub paths: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            replicates: 10,
            paths: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub dims: Vec<usize>,
    pub particles: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TclSection {
    /// Population draws averaged into the nominal profile.
    pub profile_draws: usize,
    pub ranges: ParamRanges,
}

impl Default for TclSection {
    fn default() -> Self {
        TclSection {
            profile_draws: 1000,
            ranges: ParamRanges::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqrSection {
    pub sigma: f64,
    pub bound: f64,
    pub x0: f64,
}

impl Default for LqrSection {
    fn default() -> Self {
        LqrSection {
            sigma: 0.1,
            bound: 10.0,
            x0: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatSection {
    pub scale: f64,
}

impl Default for HeatSection {
    fn default() -> Self {
        HeatSection { scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSection,
    pub solver: SolverSection,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub compare: Option<CompareSection>,
    #[serde(default)]
    pub tcl: TclSection,
    #[serde(default)]
    pub lqr: LqrSection,
    #[serde(default)]
    pub heat: HeatSection,
    /// Output directory used when `--out` is not given.
    #[serde(default)]
    pub output: Option<String>,
}

fn one() -> f64 {
    1.0
}

fn two() -> u32 {
    2
}

fn both() -> SchemeChoice {
    SchemeChoice::Both
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.problem.dim == 0 {
            return bad("problem.dim must be at least 1");
        }
        if !(self.problem.horizon > 0.0 && self.problem.horizon.is_finite()) {
            return bad("problem.horizon must be positive");
        }
        if self.problem.family == Family::Lqr && self.problem.dim != 1 {
            return bad("the lqr family is scalar: problem.dim must be 1");
        }
        if self.solver.steps == 0 {
            return bad("solver.steps must be at least 1");
        }
        if self.solver.particles == 0 {
            return bad("solver.particles must be at least 1");
        }
        if !(self.solver.terminal_cov >= 0.0 && self.solver.terminal_cov.is_finite()) {
            return bad("solver.terminal_cov must be non-negative");
        }
        if self.evaluation.replicates < 2 || self.evaluation.paths < 2 {
            return bad("evaluation.replicates and evaluation.paths must be at least 2");
        }
        if let Some(c) = &self.compare {
            if c.dims.is_empty() || c.particles.is_empty() {
                return bad("compare.dims and compare.particles must not be empty");
            }
            if c.dims.contains(&0) || c.particles.contains(&0) {
                return bad("compare.dims and compare.particles must be positive");
            }
            if self.problem.family == Family::Lqr && c.dims.iter().any(|&d| d != 1) {
                return bad("the lqr family is scalar: compare.dims must be [1]");
            }
        }
        if self.problem.family == Family::Tcl {
            if self.tcl.profile_draws == 0 {
                return bad("tcl.profile_draws must be at least 1");
            }
            self.ranges().validate()?;
        }
        if !(self.lqr.bound > 0.0) || !(self.heat.scale > 0.0) {
            return bad("lqr.bound and heat.scale must be positive");
        }
        Ok(())
    }

    /// TCL ranges on the run's time grid.
    pub fn ranges(&self) -> ParamRanges {
        ParamRanges {
            horizon: self.problem.horizon,
            steps: self.solver.steps,
            ..self.tcl.ranges.clone()
        }
    }

    pub fn override_seed(&mut self, seed: u64) {
        self.seeds = Seeds {
            population: seed,
            grid: seed,
            evaluation: seed,
        };
    }
}
