//! Command-line front end.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use commands::RunOptions;
use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "bwd-hjb", version, about = "Backward and forward regression solvers for stochastic control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve with the configured scheme(s) and write value models and diagnostics.
    Solve(CommonArgs),
    /// Generate the nominal and target consumption profiles (tcl family).
    Profile(CommonArgs),
    /// Sweep dimensions and particle counts and tabulate the estimated costs.
    Compare(CommonArgs),
    /// Solve N_grid times and estimate the cost of the resulting policies.
    Evaluate(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment configuration (TOML).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Output directory; defaults to the config's `output` or `out`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Replace the population, grid and evaluation seeds.
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, value_name = "INT")]
    pub threads: Option<usize>,
    /// Add wall-clock columns to the CSV outputs.
    #[arg(long)]
    pub timings: bool,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        e if e.is_numerical() => EXIT_NUMERICAL,
        Error::Io(_) | Error::Csv(_) => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

/// Parses `args` (program name first) and runs the command. Usage errors
/// print clap's message and return its exit code.
pub fn run_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
    }
}

/// Runs one command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let (name, args) = match &cli.command {
        Command::Solve(a) => ("solve", a),
        Command::Profile(a) => ("profile", a),
        Command::Compare(a) => ("compare", a),
        Command::Evaluate(a) => ("evaluate", a),
    };
    let result = (|| {
        let mut cfg = ExperimentConfig::load(&args.config)?;
        if let Some(seed) = args.seed {
            cfg.override_seed(seed);
        }
        if let Some(t) = args.threads {
            if t == 0 {
                return Err(Error::Config("--threads must be at least 1".into()));
            }
            // fails only if a pool already exists, which keeps the old one
            let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
        }
        let opts = RunOptions {
            out: args
                .out
                .clone()
                .or_else(|| cfg.output.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out")),
            timings: args.timings,
        };
        match &cli.command {
            Command::Solve(_) => commands::cmd_solve(&cfg, &opts),
            Command::Profile(_) => commands::cmd_profile(&cfg, &opts),
            Command::Compare(_) => commands::cmd_compare(&cfg, &opts),
            Command::Evaluate(_) => commands::cmd_evaluate(&cfg, &opts),
        }
    })();
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("bwd-hjb {name}: {e}");
            exit_code(&e)
        }
    }
}
