//! `capbound`: capacity bounds, constrained training, margins and oracle
//! checks from the command line.
//!
//! Exit codes: 0 success, 1 computation failure, 2 configuration failure.

mod commands;
mod io;
mod report;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use report::Format;

/// Bad input: unreadable or malformed spec, dataset, model or flags.
#[derive(Debug)]
pub struct ConfigError(String);

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub const SEED_ENV: &str = "CAPBOUND_SEED";

#[derive(Parser)]
#[command(name = "capbound", version, about = "Radius-margin capacity bounds for max-norm constrained networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute every applicable capacity bound for a spec.
    Bound(BoundArgs),
    /// Train a network inside its max-norm class.
    Train(TrainArgs),
    /// Per-sample output margin, input margin and certificate.
    Margins(MarginsArgs),
    /// Run the oracle suite.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct OutputArgs {
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Report path; stdout when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
pub struct BoundArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Data radius R, overriding the spec's `[data]` section.
    #[arg(long)]
    radius: Option<f64>,
    /// Add the robust bound for input noise of norm at most C.
    #[arg(long, value_name = "C")]
    robust: Option<f64>,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Hinge,
    Robust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskArg {
    None,
    Dropout,
    Dropconnect,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Hinge)]
    objective: ObjectiveArg,
    /// Noise radius for the robust objective.
    #[arg(long, default_value_t = 0.1)]
    c: f64,
    #[arg(long, value_enum, default_value_t = MaskArg::None)]
    mask: MaskArg,
    #[arg(long)]
    model_out: PathBuf,
    /// Per-epoch history as CSV.
    #[arg(long)]
    history_out: PathBuf,
}

#[derive(Args)]
pub struct MarginsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Search radius base R; defaults to the larger of the model's and the data's.
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long, default_value_t = capbound::margins::DEFAULT_BALL_SAMPLES)]
    ball_samples: usize,
    /// Bisection tolerance; defaults to 1e-6·R.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Spec to check against; the bundled demo spec when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Run only oracles whose name contains this string.
    #[arg(long)]
    only: Option<String>,
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    #[arg(long, default_value_t = 50)]
    nets: usize,
    #[arg(long, default_value_t = 500)]
    fd_probes: usize,
    #[arg(long, default_value_t = 3)]
    shatter_max_m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutputArgs,
}

/// `CAPBOUND_SEED` wins over the flag.
pub fn resolve_seed(flag: u64) -> anyhow::Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| ConfigError::new(format!("{SEED_ENV}=`{v}` is not an unsigned integer")).into()),
        Err(_) => Ok(flag),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bound(a) => commands::bound(&a),
        Command::Train(a) => commands::train(&a),
        Command::Margins(a) => commands::margins(&a),
        Command::Verify(a) => commands::verify(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<ConfigError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
