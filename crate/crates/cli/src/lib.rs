//! Batch front-end: reads an experiment config, runs the solvers and
//! diagnostics, and writes CSV/JSON artifacts.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 solver
//! nonconvergence, 3 failed invariant.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod selftest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use monge_lab::LabError;

pub use commands::LogRange;
pub use config::ExperimentConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NONCONVERGENCE: i32 = 2;
pub const EXIT_INCONSISTENT: i32 = 3;

/// Environment variable capping the worker count.
pub const THREADS_VAR: &str = "MONGE_LAB_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lab(#[from] LabError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    /// Some runs of a batch failed to produce a map.
    #[error("{0}")]
    Solver(String),
    #[error("{0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Json(_) | CliError::Io { .. } | CliError::Csv(_) => EXIT_CONFIG,
            CliError::Solver(_) => EXIT_NONCONVERGENCE,
            CliError::Invariant(_) => EXIT_INCONSISTENT,
            CliError::Lab(e) => match e {
                LabError::NonConvergence { .. } | LabError::Degenerate { .. } => EXIT_NONCONVERGENCE,
                LabError::Internal(_) | LabError::UndefinedDirection(_) => EXIT_INCONSISTENT,
                _ => EXIT_CONFIG,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "monge-lab", version, about = "Regularized Monge transport experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    /// Grid-graph flow (exact min-cost flow, axis metric).
    Graph,
    /// Euclidean-consistent flow (primal-dual iterations).
    Isotropic,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample the monotone map of the triangle construction above (-2, 0).
    Counterexample {
        /// `start:end:logN`, N log-spaced offsets from the axis.
        #[arg(long, default_value = "1e-2:1e-6:log9")]
        sigma_grid: LogRange,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the configured instance at one eps and write the map.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the first entry of `eps_list`.
        #[arg(long)]
        eps: Option<f64>,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-node Jacobian diagnostics over the probe at one eps.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diagnostics reports for every eps of the config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transport density from a minimal flow between source and target.
    Density {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "graph")]
        metric: Metric,
        /// Stopping tolerance of the isotropic iterations.
        #[arg(long, default_value_t = 1e-7)]
        tol: f64,
        #[arg(long, default_value_t = 1_000_000)]
        max_iter: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fast invariant suite; writes its results and exits 0 iff all pass.
    Selftest {
        #[arg(long, default_value_t = selftest::DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value = "selftest_out")]
        out: PathBuf,
    },
}

fn configure_threads() -> CliResult<()> {
    let Some(raw) = std::env::var_os(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .to_str()
        .and_then(|s| s.trim().parse().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_VAR} must be a positive integer, got {raw:?}")))?;
    // a pool may already exist when run() is called twice in one process
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        log::debug!("global thread pool already initialized");
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Counterexample { sigma_grid, out } => commands::counterexample(&sigma_grid, &out),
        Command::Solve { config, eps, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::solve(&cfg, eps, &cfg.output(out.as_deref()))
        }
        Command::Diagnose { config, eps, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::diagnose(&cfg, eps, &cfg.output(out.as_deref()))
        }
        Command::Sweep { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::sweep(&cfg, &cfg.output(out.as_deref()))
        }
        Command::Density { config, metric, tol, max_iter, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::density(&cfg, metric, tol, max_iter, &cfg.output(out.as_deref()))
        }
        Command::Selftest { seed, out } => selftest::run(seed, &out),
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let outcome = configure_threads().and_then(|()| dispatch(cli));
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
