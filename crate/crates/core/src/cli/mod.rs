//! Command-line interface: `simulate`, `calibrate`, `predict`, `audit` and
//! `compare`.
//!
//! Exit codes: 0 success (warnings allowed), 1 usage error, 2 data or
//! validation error, 3 internal error.

mod commands;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::calibration::{CalibrationError, Method};
use crate::data::{DataError, ScoreScale};
use crate::metrics::AuditError;
use crate::prediction::{PredictError, UnseenGroupPolicy};
use crate::synth::SynthError;

/// Environment variable holding the default output directory.
pub const OUT_DIR_ENV: &str = "CONFAUDIT_OUT_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Data(String),

    #[error("cannot write output: {0}")]
    Output(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Output(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

macro_rules! data_error_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}

data_error_from!(DataError, CalibrationError, PredictError, AuditError, SynthError);

#[derive(Debug, Parser)]
#[command(name = "confaudit", version, about = "Conformal prediction sets and subgroup coverage audits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic score table.
    Simulate(SimulateArgs),
    /// Split a score table and fit one predictor per (method, alpha).
    Calibrate(CalibrateArgs),
    /// Build prediction sets for a table with one predictor.
    Predict(PredictArgs),
    /// Evaluate predictors on a test table and write an audit report.
    Audit(AuditArgs),
    /// Audit a subset of methods and print a method-by-alpha sweep.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleArg {
    Probability,
    Logit,
    Unnormalized,
}

impl From<ScaleArg> for ScoreScale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Probability => ScoreScale::Probability,
            ScaleArg::Logit => ScoreScale::Logit,
            ScaleArg::Unnormalized => ScoreScale::Unnormalized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetArg {
    /// Seven Fitzpatrick groups, three categories, malignant critical.
    Fitzpatrick,
    /// Easy, medium and hard groups over uniform classes.
    Shift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemperatureArg {
    None,
    Global,
    PerGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyArg {
    FallbackAggregate,
    FullSet,
}

impl From<PolicyArg> for UnseenGroupPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::FallbackAggregate => UnseenGroupPolicy::FallbackAggregate,
            PolicyArg::FullSet => UnseenGroupPolicy::FullSet,
        }
    }
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.trim().parse().map_err(|e| format!("{s:?} is not a number: {e}"))?;
    if a > 0.0 && a < 1.0 {
        Ok(a)
    } else {
        Err(format!("alpha must lie in (0, 1), got {a}"))
    }
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    parse_alpha(s).map_err(|_| format!("calibration fraction must lie in (0, 1), got {s}"))
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "fitzpatrick")]
    pub preset: PresetArg,
    /// JSON generator config; replaces the preset entirely.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Total records (fitzpatrick) or records per group (shift).
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Class count for the shift preset.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Generator seed; a `--config` file carries its own.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Monte-Carlo samples per record (JSONL output only).
    #[arg(long)]
    pub mc_samples: Option<usize>,
    #[arg(long, value_enum, default_value = "probability")]
    pub scale: ScaleArg,
    /// Output table, `.csv` or `.jsonl`; relative paths resolve against the output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = OUT_DIR_ENV, default_value = ".")]
    pub out_dir: PathBuf,
}

/// How to read a score table.
#[derive(Debug, Args, Serialize)]
pub struct InputArgs {
    /// Score table, `.csv` or `.jsonl`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "probability")]
    pub scale: ScaleArg,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_delimiter = ',', default_values_t = Method::ALL)]
    pub methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', value_parser = parse_alpha, default_values_t = [0.1, 0.2, 0.3, 0.4, 0.5])]
    pub alphas: Vec<f64>,
    #[arg(long, value_parser = parse_fraction, default_value_t = 0.5)]
    pub calibration_fraction: f64,
    /// Seed for the split (and for randomized scores).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Split the whole table at once instead of group by group.
    #[arg(long)]
    pub no_stratify: bool,
    /// RAPS penalty weight.
    #[arg(long, default_value_t = crate::scoring::DEFAULT_RAPS_LAMBDA)]
    pub lambda: f64,
    /// RAPS rank allowance; defaults to min(5, K).
    #[arg(long)]
    pub k_reg: Option<usize>,
    /// Use seeded randomized scores; sets may then be empty.
    #[arg(long)]
    pub randomized: bool,
    /// Temperature scaling; defaults to `global` for logit input, `none` otherwise.
    #[arg(long, value_enum)]
    pub temperature: Option<TemperatureArg>,
    #[arg(long, env = OUT_DIR_ENV, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub predictor: PathBuf,
    /// Score table on the predictor's input scale.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "fallback-aggregate")]
    pub policy: PolicyArg,
    /// Output JSONL; defaults to `predictions_{method}_{alpha}.jsonl` in the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = OUT_DIR_ENV, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AuditArgs {
    /// Predictor files, or directories searched for `predictor_*.json`.
    #[arg(long, num_args = 1.., required = true)]
    pub predictors: Vec<PathBuf>,
    /// Test table on the predictors' input scale.
    #[arg(long)]
    pub test: PathBuf,
    /// Critical class indices for rule-in/rule-out.
    #[arg(long, value_delimiter = ',')]
    pub critical: Vec<usize>,
    /// Divide disparities by the number of group pairs instead of the number of groups.
    #[arg(long)]
    pub normalize_pairs: bool,
    #[arg(long, value_enum, default_value = "fallback-aggregate")]
    pub policy: PolicyArg,
    /// Also write set-size scatter plots as SVG.
    #[arg(long)]
    pub svg: bool,
    #[arg(long, env = OUT_DIR_ENV, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    #[command(flatten)]
    pub audit: AuditArgs,
    /// Methods to compare; at least two.
    #[arg(long, value_delimiter = ',', default_values_t = Method::ALL)]
    pub methods: Vec<Method>,
}

/// Help and version requests exit 0; every other parse failure is a usage error.
fn parse_exit_code(e: &clap::Error) -> i32 {
    if e.use_stderr() {
        1
    } else {
        0
    }
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return parse_exit_code(&e);
        }
    };
    let result = std::panic::catch_unwind(|| commands::dispatch(cli.command));
    match result {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
        Err(_) => {
            eprintln!("error: internal error (panic)");
            3
        }
    }
}
