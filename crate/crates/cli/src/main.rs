//! `fedplt`: generate instances, tune, run, sweep and account for privacy.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedplt::FedError;
use serde::Serialize;

/// Exit status for a failed invocation.
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NO_STABLE_POINT: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

/// Worker-count override for the rayon pool.
pub const WORKERS_ENV: &str = "FEDPLT_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "fedplt", version, about = "Federated Peaceman-Rachford splitting with inexact local training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic logistic-regression instance.
    Generate(GenerateArgs),
    /// Search a parameter grid for the best contraction certificate.
    Tune(TuneArgs),
    /// Run the federated algorithm and record its trajectory.
    Run(RunArgs),
    /// Monte-Carlo sweep along one parameter axis.
    Sweep(SweepArgs),
    /// Rényi and approximate differential-privacy report for noisy local training.
    Privacy(PrivacyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RegChoice {
    L2,
    Nonconvex,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = fedplt::harness::DESK_AGENTS)]
    pub agents: usize,
    #[arg(long, default_value_t = fedplt::harness::DESK_DIM)]
    pub dim: usize,
    #[arg(long, default_value_t = fedplt::harness::DESK_PER_AGENT)]
    pub per_agent: usize,
    #[arg(long, value_enum, default_value_t = RegChoice::L2)]
    pub reg: RegChoice,
    #[arg(long, default_value_t = fedplt::harness::DESK_REG_WEIGHT)]
    pub reg_weight: f64,
    /// Weight of an l1 penalty on the consensus variable; 0 disables it.
    #[arg(long, default_value_t = 0.0)]
    pub l1: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneSolverChoice {
    Gd,
    Agd,
    Exact,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TuneArgs {
    /// Instance file written by `generate`.
    pub dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.3, 1.0, 3.0, 10.0])]
    pub rho_grid: Vec<f64>,
    /// Step sizes as multiples of the rate-optimal step (see `--gamma-absolute`).
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 0.75, 1.0])]
    pub gamma_grid: Vec<f64>,
    /// Read `--gamma-grid` as absolute step sizes.
    #[arg(long)]
    pub gamma_absolute: bool,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 5, 10])]
    pub ne_grid: Vec<u32>,
    #[arg(long, default_value_t = 1.0)]
    pub p_lo: f64,
    /// Defaults to `--p-lo`.
    #[arg(long)]
    pub p_hi: Option<f64>,
    /// Additive error bound of the local solver, used for the asymptote column.
    #[arg(long, default_value_t = 0.0)]
    pub nu: f64,
    #[arg(long, value_enum, default_value_t = TuneSolverChoice::Gd)]
    pub solver: TuneSolverChoice,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverChoice {
    Gd,
    Agd,
    Sgd,
    Noisy,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricChoice {
    Grad,
    Consensus,
    State,
}

/// Algorithm and simulation flags shared by `run` and `sweep`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct AlgoArgs {
    #[arg(long, value_enum, default_value_t = SolverChoice::Gd)]
    pub solver: SolverChoice,
    /// Local epochs per round.
    #[arg(long, default_value_t = 5)]
    pub ne: usize,
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    /// Local step size; the rate-optimal step when omitted.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Mini-batch size for `--solver sgd`.
    #[arg(long, default_value_t = 10)]
    pub batch: usize,
    /// Noise standard deviation for `--solver noisy`.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Per-sample gradient clipping bound for `--solver noisy`.
    #[arg(long)]
    pub clip: Option<f64>,
    /// Gradient tolerance of `--solver exact`.
    #[arg(long, default_value_t = fedplt::solvers::EXACT_TOLERANCE)]
    pub tolerance: f64,
    /// `full`, `bernoulli:<p>` or `subset:<m>`.
    #[arg(long, default_value = "full")]
    pub participation: String,
    #[arg(long, default_value_t = 100)]
    pub rounds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Draw initial models from the private-initialization distribution (needs `--tau`).
    #[arg(long)]
    pub private_init: bool,
    /// Defaults to the gradient norm for smooth instances and the distance to the solution otherwise.
    #[arg(long, value_enum)]
    pub metric: Option<MetricChoice>,
    #[arg(long, default_value_t = fedplt::harness::DESK_THRESHOLD)]
    pub threshold: f64,
    /// Simulated cost of one local gradient.
    #[arg(long, default_value_t = 1.0)]
    pub tg: f64,
    /// Simulated cost of one communication.
    #[arg(long, default_value_t = 10.0)]
    pub tc: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RunArgs {
    pub dataset: PathBuf,
    #[command(flatten)]
    pub algo: AlgoArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureChoice {
    Time,
    Asymptotic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatChoice {
    Csv,
    Json,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    pub dataset: PathBuf,
    /// One of ne, rho, tau, participation, tc.
    #[arg(long)]
    pub axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    #[arg(long, default_value_t = fedplt::harness::DESK_SEEDS)]
    pub seeds: usize,
    #[arg(long, value_enum, default_value_t = MeasureChoice::Time)]
    pub measure: MeasureChoice,
    #[arg(long, value_enum, default_value_t = FormatChoice::Csv)]
    pub format: FormatChoice,
    #[command(flatten)]
    pub algo: AlgoArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PrivacyArgs {
    /// Instance file; supplies dataset sizes and convexity bounds.
    pub dataset: Option<PathBuf>,
    /// Gradient sensitivity bound.
    #[arg(long = "L", alias = "sensitivity")]
    pub sensitivity: f64,
    /// Noise standard deviation.
    #[arg(long)]
    pub tau: f64,
    #[arg(long)]
    pub gamma: f64,
    /// Rényi order, greater than 1.
    #[arg(long)]
    pub lambda_order: f64,
    #[arg(long)]
    pub rounds: u64,
    #[arg(long)]
    pub ne: u64,
    /// Per-agent dataset sizes when no instance file is given.
    #[arg(long, value_delimiter = ',')]
    pub q: Option<Vec<usize>>,
    /// Strong-convexity modulus when no instance file is given.
    #[arg(long)]
    pub lambda_lo: Option<f64>,
    /// Penalty used to check the step-size precondition against an instance.
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    #[arg(long, value_delimiter = ',', default_values_t = fedplt::privacy::DEFAULT_DELTAS)]
    pub delta: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Invalid flag combination detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<FedError>() {
        Some(FedError::InvalidParameter(_) | FedError::DimensionMismatch { .. } | FedError::NonconvexBounds) => {
            EXIT_USAGE
        }
        Some(FedError::NoStablePoint) => EXIT_NO_STABLE_POINT,
        Some(FedError::NonFinite { .. } | FedError::NoConvergence { .. }) => EXIT_NUMERICAL,
        _ => EXIT_FAILURE,
    }
}

fn configure_workers() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| usage(format!("{WORKERS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    configure_workers()?;
    match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Tune(a) => commands::tune(&a),
        Command::Run(a) => commands::run(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Privacy(a) => commands::privacy(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
