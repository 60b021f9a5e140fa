//! Batch front end for Kalman-filter quantum tomography.
//!
//! Exit codes: 0 success, 2 input/parse error, 3 numeric failure,
//! 4 model-consistency diagnostic (MaxLik state outside the confidence
//! region), 5 empty physical region or missing pipeline stage.

mod commands;
mod jsonio;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: parse error at line {line}, column {column}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("{message}")]
    Invalid { message: String },
    #[error("{message}")]
    Numeric { message: String },
    #[error(
        "the maximum-likelihood state lies outside the confidence region \
         (M^2_ML = {m2_ml:.4} > gamma = {gamma:.4}); this indicates that something \
         has gone wrong: the data are inconsistent with the measurement model \
         (drift, misalignment, or a wrong POVM description)"
    )]
    Diagnostic { m2_ml: f64, gamma: f64 },
    #[error("{message}")]
    Missing { message: String },
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Parse { .. } | CliError::Io { .. } | CliError::Invalid { .. } => 2,
            CliError::Numeric { .. } => 3,
            CliError::Diagnostic { .. } => 4,
            CliError::Missing { .. } => 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlobalOpts {
    pub seed: u64,
    pub conservative: bool,
    pub output: Option<PathBuf>,
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    /// Closest physical state and the physical confidence bound only.
    Simple,
    /// Full restriction of the Gaussian to the physical set.
    Kalman,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CostArg {
    /// Sum of squared successive differences of element diagonals.
    Smoothness,
    /// Negative von Neumann entropy.
    Entropy,
}

#[derive(Parser)]
#[command(
    name = "kftomo",
    version,
    about = "Bayesian quantum tomography with Kalman filters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Use the conservative confidence threshold.
    #[arg(long, global = true)]
    conservative: bool,
    /// Output path (single-input invocations only).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Worker threads when several input files are given.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a ground-truth model file.
    Simulate { model: PathBuf },
    /// Run the Kalman reconstruction on dataset file(s), writing reports.
    Reconstruct {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Restrict a reconstructed posterior to the physical set.
    Restrict {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = MethodArg::Kalman)]
        method: MethodArg,
        /// Relative slack on the restriction stopping criterion.
        #[arg(long, default_value_t = 0.003)]
        epsilon: f64,
    },
    /// Minimize a convex cost inside the physical confidence region.
    Regularize {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = CostArg::Smoothness)]
        cost: CostArg,
    },
    /// Emit CSV plot data (marginal error bars, 2D confidence slices).
    Report {
        report: PathBuf,
        /// Two eigenvector indices "i,j" (ascending eigenvalues) spanning
        /// the slice plane.
        #[arg(long)]
        slice: Option<String>,
        /// Emit per-component mean and marginal standard deviation rows.
        #[arg(long)]
        errorbars: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let opts = GlobalOpts {
        seed: cli.seed,
        conservative: cli.conservative,
        output: cli.output,
        jobs: cli.jobs.max(1),
    };
    let code = match cli.command {
        Command::Simulate { model } => run_one(&model, &|p| commands::cmd_simulate(p, &opts)),
        Command::Reconstruct { inputs } => {
            run_many(inputs, &opts, &|p| commands::cmd_reconstruct(p, &opts))
        }
        Command::Restrict {
            reports,
            method,
            epsilon,
        } => run_many(reports, &opts, &|p| {
            commands::cmd_restrict(p, method, epsilon, &opts)
        }),
        Command::Regularize { reports, cost } => {
            run_many(reports, &opts, &|p| commands::cmd_regularize(p, cost, &opts))
        }
        Command::Report {
            report,
            slice,
            errorbars,
        } => run_one(&report, &|p| {
            commands::cmd_report(p, slice.as_deref(), errorbars, &opts)
        }),
    };
    ExitCode::from(code)
}

fn run_one(path: &Path, f: &(dyn Fn(&Path) -> Result<(), CliError> + Sync)) -> u8 {
    match f(path) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn run_many(
    paths: Vec<PathBuf>,
    opts: &GlobalOpts,
    f: &(dyn Fn(&Path) -> Result<(), CliError> + Sync),
) -> u8 {
    if paths.len() > 1 && opts.output.is_some() {
        eprintln!("error: --output requires a single input file");
        return 2;
    }
    if paths.len() <= 1 || opts.jobs <= 1 {
        let mut worst = 0u8;
        for p in &paths {
            worst = worst.max(run_one(p, f));
        }
        return worst;
    }
    let next = AtomicUsize::new(0);
    let worst = Mutex::new(0u8);
    std::thread::scope(|scope| {
        for _ in 0..opts.jobs.min(paths.len()) {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= paths.len() {
                    break;
                }
                let code = run_one(&paths[idx], f);
                let mut w = worst.lock().unwrap();
                *w = (*w).max(code);
            });
        }
    });
    let code = *worst.lock().unwrap();
    code
}
