//! Command-line front end: problem files in, JSON and text reports out.

pub mod commands;
pub mod examples;
pub mod problem;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cqkit::vcalc::Norm;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("internal error: {0}")]
    Internal(String),
    #[error("{0} reproduced value(s) differ from the stored expectations")]
    Mismatch(usize),
    #[error("cannot access {path}: {message}")]
    Io { path: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } => 2,
            CliError::Internal(_) | CliError::Mismatch(_) | CliError::Io { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    L1,
    Linf,
}

impl From<NormArg> for Norm {
    fn from(n: NormArg) -> Norm {
        match n {
            NormArg::L1 => Norm::L1,
            NormArg::Linf => Norm::Linf,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExampleId {
    #[value(name = "4.1")]
    E41,
    #[value(name = "5.1")]
    E51,
    #[value(name = "5.2")]
    E52,
}

impl ExampleId {
    pub fn label(self) -> &'static str {
        match self {
            ExampleId::E41 => "4.1",
            ExampleId::E51 => "5.1",
            ExampleId::E52 => "5.2",
        }
    }
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Feasibility and active-set tolerance.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Seed of the sampling plan.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Sampling radii as `r0,rho,levels` (radii r0·rho^k for k = 0..=levels).
    #[arg(long, global = true)]
    pub radii: Option<String>,
    #[arg(long, global = true)]
    pub points_per_radius: Option<usize>,
    /// Cap on biactive branch assignments.
    #[arg(long, global = true)]
    pub branch_cap: Option<usize>,
    /// Grid points per dimension for the distance-to-feasible-set oracle.
    #[arg(long, global = true)]
    pub grid: Option<usize>,
    /// Norm of the complementarity distance in the error-bound residual.
    #[arg(long, global = true, value_enum)]
    pub norm: Option<NormArg>,
    /// Output prefix: writes PREFIX.json and PREFIX.txt (reformulate-bilevel: the file itself).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Analyze only the named anchor.
    #[arg(long, global = true)]
    pub anchor: Option<String>,
    /// Analyze this comma-separated point instead of the file's anchors.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub point: Option<String>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// NNAMCQ, full rank, LCQ, RCPLD and RCRCQ with implication cross-checks.
    CheckCq { file: PathBuf },
    /// M-stationarity of the declared objective at each anchor.
    CheckStationarity { file: PathBuf },
    /// Empirical error-bound modulus at each anchor.
    ErrorBound {
        file: PathBuf,
        /// Use the strict-complementarity residual instead of the full one.
        #[arg(long)]
        strict: bool,
    },
    /// Writes the combined program of a bilevel file as a problem file.
    ReformulateBilevel { file: PathBuf },
    /// Penalized local solve started from each anchor.
    PenaltySolve {
        file: PathBuf,
        /// Adds mu times the residual to the objective (exact penalty).
        #[arg(long)]
        mu: Option<f64>,
        /// Comma-separated penalty parameters.
        #[arg(long)]
        schedule: Option<String>,
        /// Objective evaluations per penalty parameter.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Runs a shipped example and compares with its stored expectations.
    ReproduceExample {
        #[arg(value_enum)]
        example: ExampleId,
    },
}

#[derive(Debug, Clone, Parser)]
#[command(name = "cqkit", version, about = "Constraint qualifications, stationarity and error bounds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

/// Parses arguments, runs the command and writes outputs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::execute(&cli) {
        Ok(out) => {
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            match out.emit(&cli.common) {
                Ok(()) => out.exit_code(),
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
