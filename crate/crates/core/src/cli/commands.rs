use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Family, SchemeChoice};
use crate::backward_solver::{solve_backward, SolverConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_replicates, EvaluationReport};
use crate::families::{HeatProblem, LqrProblem};
use crate::forward_solver::{solve_forward, ForwardConfig};
use crate::gaussian_flow::GaussianState;
use crate::linalg::SymmetricMatrix;
use crate::output::{fmt, Scheme, SolverOutput};
use crate::problem::ControlProblem;
use crate::rng::{stream, Domain};
use crate::tcl::{nominal_profile, sample_population, target_profile, TclProblem};

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Add wall-clock columns to the CSV outputs.
    pub timings: bool,
}

/// A concrete problem built from the configuration.
pub struct Setup {
    pub problem: Box<dyn ControlProblem>,
    pub x0: Vec<f64>,
    pub nominal: Vec<f64>,
    pub tcl: Option<TclExtras>,
}

pub struct TclExtras {
    pub population: String,
    pub nominal_profile: Vec<f64>,
    pub target_profile: Vec<f64>,
}

pub fn build(cfg: &ExperimentConfig, dim: usize) -> Result<Setup> {
    let horizon = cfg.problem.horizon;
    match cfg.problem.family {
        Family::Tcl => {
            let ranges = cfg.ranges();
            let seed = cfg.seeds.population;
            let r_nom = nominal_profile(&ranges, dim, cfg.tcl.profile_draws, seed)?;
            let params = sample_population(&ranges, dim, &mut stream(seed, Domain::Population, 0, 0))?;
            let r = target_profile(&r_nom, horizon);
            let population = params.to_text();
            let problem = TclProblem::new(params, r.clone(), horizon)?;
            Ok(Setup {
                x0: problem.initial_state(),
                nominal: problem.nominal_control(),
                problem: Box::new(problem),
                tcl: Some(TclExtras {
                    population,
                    nominal_profile: r_nom,
                    target_profile: r,
                }),
            })
        }
        Family::Lqr => Ok(Setup {
            problem: Box::new(LqrProblem::new(cfg.lqr.sigma, horizon, cfg.lqr.bound)?),
            x0: vec![cfg.lqr.x0],
            nominal: vec![0.0],
            tcl: None,
        }),
        Family::Heat => Ok(Setup {
            problem: Box::new(HeatProblem::new(dim, cfg.heat.scale, horizon)),
            x0: vec![0.0; dim],
            nominal: vec![0.0],
            tcl: None,
        }),
    }
}

fn schemes(choice: SchemeChoice) -> Vec<Scheme> {
    match choice {
        SchemeChoice::Backward => vec![Scheme::Backward],
        SchemeChoice::Forward => vec![Scheme::Forward],
        SchemeChoice::Both => vec![Scheme::Backward, Scheme::Forward],
    }
}

pub fn run_scheme(setup: &Setup, cfg: &ExperimentConfig, scheme: Scheme, particles: usize, seed: u64) -> Result<SolverOutput> {
    let d = setup.problem.dim();
    let s = &cfg.solver;
    match scheme {
        Scheme::Backward => {
            let terminal = GaussianState::new(
                DVector::from_column_slice(&setup.x0),
                SymmetricMatrix::identity(d).scaled(s.terminal_cov),
            )?;
            solve_backward(setup.problem.as_ref(), &SolverConfig::new(s.steps, particles, s.degree, seed, terminal))
        }
        Scheme::Forward => {
            let nominal = setup.nominal.clone();
            let fc = ForwardConfig::from_point(s.steps, particles, s.degree, seed, &setup.x0, Arc::new(move |_| nominal.clone()));
            solve_forward(setup.problem.as_ref(), &fc)
        }
    }
}

fn evaluate(setup: &Setup, cfg: &ExperimentConfig, scheme: Scheme, particles: usize) -> Result<EvaluationReport> {
    evaluate_replicates(
        setup.problem.as_ref(),
        scheme,
        particles,
        &setup.x0,
        cfg.evaluation.replicates,
        cfg.evaluation.paths,
        cfg.seeds.grid,
        cfg.seeds.evaluation,
        |seed| run_scheme(setup, cfg, scheme, particles, seed),
    )
}

/// Collects output files and writes them with a manifest at the end.
struct OutputSet {
    dir: PathBuf,
    files: BTreeMap<String, Vec<u8>>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    content_hash: String,
    outputs: BTreeMap<String, String>,
    config: &'a ExperimentConfig,
}

/// SHA-256 of `blob <len>\0<content>`, the way git names objects.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl OutputSet {
    fn new(dir: &Path) -> Self {
        OutputSet {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        }
    }

    fn add(&mut self, name: impl Into<String>, content: Vec<u8>) {
        self.files.insert(name.into(), content);
    }

    fn finish(self, command: &str, cfg: &ExperimentConfig) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let mut outputs = BTreeMap::new();
        let mut listing = String::new();
        for (name, content) in &self.files {
            std::fs::write(self.dir.join(name), content)?;
            let h = blob_hash(content);
            listing.push_str(&format!("{h}  {name}\n"));
            outputs.insert(name.clone(), h);
        }
        let manifest = Manifest {
            command,
            content_hash: blob_hash(listing.as_bytes()),
            outputs,
            config: cfg,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::InvalidState(e.to_string()))?;
        std::fs::write(self.dir.join("manifest.toml"), text)?;
        Ok(())
    }
}

fn profile_csv(values: &[f64], horizon: f64) -> Result<Vec<u8>> {
    let n = values.len() - 1;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "value"])?;
    for (k, v) in values.iter().enumerate() {
        w.write_record([fmt(k as f64 * horizon / n as f64), fmt(*v)])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn add_tcl_files(out: &mut OutputSet, setup: &Setup, horizon: f64) -> Result<()> {
    if let Some(t) = &setup.tcl {
        out.add("population.toml", t.population.clone().into_bytes());
        out.add("profile_nominal.csv", profile_csv(&t.nominal_profile, horizon)?);
        out.add("profile_target.csv", profile_csv(&t.target_profile, horizon)?);
    }
    Ok(())
}

pub fn cmd_solve(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    let setup = build(cfg, cfg.problem.dim)?;
    let mut out = OutputSet::new(&opts.out);
    add_tcl_files(&mut out, &setup, cfg.problem.horizon)?;
    for scheme in schemes(cfg.solver.scheme) {
        let result = run_scheme(&setup, cfg, scheme, cfg.solver.particles, cfg.seeds.grid)?;
        let mut models = Vec::new();
        result.write_models(&mut models)?;
        out.add(format!("{scheme}_models.txt"), models);
        let mut diag = Vec::new();
        result.write_diagnostics(&mut diag, opts.timings)?;
        out.add(format!("{scheme}_diagnostics.csv"), diag);
        if scheme == Scheme::Backward {
            out.add("backward_gaussians.txt", result.gaussians_text().into_bytes());
        }
    }
    out.finish("solve", cfg)
}

pub fn cmd_profile(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    if cfg.problem.family != Family::Tcl {
        return Err(Error::Config("profile needs the tcl problem family".into()));
    }
    let setup = build(cfg, cfg.problem.dim)?;
    let mut out = OutputSet::new(&opts.out);
    add_tcl_files(&mut out, &setup, cfg.problem.horizon)?;
    out.finish("profile", cfg)
}

fn report_header(timings: bool) -> Vec<&'static str> {
    let mut h = vec!["scheme", "d", "N", "J_hat", "sigma_hat"];
    if timings {
        h.push("wall_time");
    }
    h.push("peak_particle_memory");
    h
}

fn report_row(r: &EvaluationReport, timings: bool) -> Vec<String> {
    let mut row = vec![
        r.scheme.to_string(),
        r.dim.to_string(),
        r.particles.to_string(),
        fmt(r.j_hat),
        fmt(r.sigma_hat),
    ];
    if timings {
        row.push(fmt(r.wall_time_s));
    }
    row.push(r.peak_particle_memory.to_string());
    row
}

fn reports_csv(reports: &[EvaluationReport], timings: bool) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(report_header(timings))?;
    for r in reports {
        w.write_record(report_row(r, timings))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn costs_csv(r: &EvaluationReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["grid_seed".to_string()];
    header.extend((0..r.paths).map(|j| format!("path_{j}")));
    w.write_record(&header)?;
    for (seed, row) in r.grid_seeds.iter().zip(&r.costs) {
        let mut rec = vec![seed.to_string()];
        rec.extend(row.iter().map(|v| fmt(*v)));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    let setup = build(cfg, cfg.problem.dim)?;
    let mut out = OutputSet::new(&opts.out);
    let mut reports = Vec::new();
    for scheme in schemes(cfg.solver.scheme) {
        let r = evaluate(&setup, cfg, scheme, cfg.solver.particles)?;
        out.add(format!("{scheme}_costs.csv"), costs_csv(&r)?);
        reports.push(r);
    }
    out.add("evaluation.csv", reports_csv(&reports, opts.timings)?);
    out.finish("evaluate", cfg)
}

/// Runs every `(scheme, d, N)` cell of the sweep.
pub fn compare_reports(cfg: &ExperimentConfig) -> Result<Vec<EvaluationReport>> {
    let sweep = cfg
        .compare
        .as_ref()
        .ok_or_else(|| Error::Config("compare needs a [compare] section with dims and particles".into()))?;
    let mut reports = Vec::new();
    for &d in &sweep.dims {
        let setup = build(cfg, d)?;
        for &n in &sweep.particles {
            for scheme in schemes(cfg.solver.scheme) {
                reports.push(evaluate(&setup, cfg, scheme, n)?);
            }
        }
    }
    Ok(reports)
}

pub fn cmd_compare(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    let reports = compare_reports(cfg)?;
    let mut out = OutputSet::new(&opts.out);
    out.add("compare.csv", reports_csv(&reports, opts.timings)?);
    out.finish("compare", cfg)
}
