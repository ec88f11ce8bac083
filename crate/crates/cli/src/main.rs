//! `tailavg`: train grids of small classifiers on domain-shifted data,
//! average their weights along each trajectory, and probe how reliable
//! validation-based model selection is out of domain.
//!
//! A sweep directory is the unit of work: `sweep` fills it with run
//! directories, checkpoints, curves, and a `summary.csv`; every other
//! command reads it back. Exit codes: 0 on success, 1 on a runtime failure,
//! 2 on a usage or configuration error.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tailavg_core::ensemble::EnsembleKind;
use tailavg_core::trainer::OptimizerKind;

use config::{
    DEFAULT_CLASSES, DEFAULT_DOMAINS, DEFAULT_NOISE_STD, DEFAULT_PER_DOMAIN, DEFAULT_ROTATION_STEP,
};

/// A problem with flags or configuration, reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(String);

impl UsageError {
    pub fn new(msg: impl Into<String>) -> Self {
        UsageError(msg.into())
    }
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "tailavg", version, about = "Weight averaging and model-selection diagnostics for domain generalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic rotated-cluster dataset CSV.
    GenData(GenDataArgs),
    /// Train a grid of runs per held-out domain and write a sweep directory.
    Sweep(SweepArgs),
    /// Re-average stored runs for a grid of averaging start iterations.
    AblateT0(AblateArgs),
    /// Re-average stored runs for a grid of absorption periods.
    AblateFreq(AblateArgs),
    /// Build ensembles from a sweep and score sub-ensembles of each size.
    Ensemble(EnsembleArgs),
    /// Diagnostics over a finished sweep.
    #[command(subcommand)]
    Diag(DiagCommand),
}

#[derive(Subcommand)]
enum DiagCommand {
    /// Rank correlation between validation and held-out accuracy along each
    /// run's evaluation curve.
    Rankcorr(DiagSweepArgs),
    /// Rank correlation across a domain's trials at each evaluation
    /// iteration.
    Crossrun(DiagSweepArgs),
    /// Bias-variance decomposition of the ensemble members' mean
    /// cross-entropy on each held-out domain.
    Biasvar(DiagSweepArgs),
    /// Second-order gap between the averaged model's logit and its
    /// iterates' mean logit, via finite differences.
    Taylor(TaylorArgs),
    /// Spread of held-out accuracy over the tail of each run's curve.
    Stability(StabilityArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Base seed for the generator.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of domains.
    #[arg(long, default_value_t = DEFAULT_DOMAINS)]
    pub domains: usize,
    /// Samples per domain.
    #[arg(long, default_value_t = DEFAULT_PER_DOMAIN)]
    pub per_domain: usize,
    /// Number of classes.
    #[arg(long, default_value_t = DEFAULT_CLASSES)]
    pub classes: usize,
    /// Rotation of the class layout per domain, in radians.
    #[arg(long, default_value_t = DEFAULT_ROTATION_STEP)]
    pub rotation_step: f64,
    /// Standard deviation of the per-sample noise.
    #[arg(long, default_value_t = DEFAULT_NOISE_STD)]
    pub noise_std: f64,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Sweep output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Experiment config JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset CSV to train on instead of generated data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Class count for the dataset CSV (default: inferred from labels).
    #[arg(long)]
    pub classes: Option<usize>,
    /// Trials per held-out domain.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Base seed for splits, initialization, and hyperparameter draws.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hidden layer widths, comma separated; `none` for a linear model.
    #[arg(long)]
    pub hidden: Option<String>,
    /// Optimizer.
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Minibatch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Total training iterations.
    #[arg(long)]
    pub total_iters: Option<u64>,
    /// Iterations between evaluations and checkpoints.
    #[arg(long)]
    pub eval_interval: Option<u64>,
    /// Iteration at which weight averaging starts.
    #[arg(long)]
    pub t0: Option<u64>,
    /// Absorb every freq-th iterate into the average.
    #[arg(long)]
    pub freq: Option<u64>,
    /// Worker threads (TAILAVG_THREADS overrides; default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Sweep directory to re-average.
    #[arg(long)]
    pub sweep: PathBuf,
    /// Grid of values to evaluate, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid: Vec<u64>,
    /// Output CSV (default: inside the sweep directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EnsembleArgs {
    /// Sweep directory to build ensembles from.
    #[arg(long)]
    pub sweep: PathBuf,
    /// Which checkpoints the members come from.
    #[arg(long, value_enum, default_value_t = KindArg::Eoa)]
    pub kind: KindArg,
    /// Restrict to one held-out domain (default: all).
    #[arg(long)]
    pub domain: Option<String>,
    /// Sub-ensemble sizes to score, comma separated (default: 1..=members).
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Maximum subsets scored per size.
    #[arg(long, default_value_t = 20)]
    pub subsets: usize,
    /// Seed for subset draws when enumeration is too large.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (default: `ensemble/` inside the sweep directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct DiagSweepArgs {
    /// Sweep directory to analyze.
    #[arg(long)]
    pub sweep: PathBuf,
    /// Restrict to one held-out domain (default: all).
    #[arg(long)]
    pub domain: Option<String>,
    /// Output CSV (default: `diag/` inside the sweep directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TaylorArgs {
    /// Sweep directory holding the run.
    #[arg(long)]
    pub sweep: PathBuf,
    /// Held-out domain of the run.
    #[arg(long)]
    pub domain: String,
    /// Trial index of the run.
    #[arg(long)]
    pub trial: usize,
    /// Class whose logit is probed (default: the averaged model's
    /// prediction per sample).
    #[arg(long)]
    pub class: Option<usize>,
    /// Number of held-out samples to probe.
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    /// Base finite-difference step.
    #[arg(long, default_value_t = 1e-3)]
    pub eps: f64,
    /// Output CSV (default: `diag/` inside the sweep directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct StabilityArgs {
    /// Sweep directory to analyze.
    #[arg(long)]
    pub sweep: PathBuf,
    /// Fraction of each curve's tail to measure.
    #[arg(long, default_value_t = 0.5)]
    pub tail: f64,
    /// Output CSV (default: `diag/` inside the sweep directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    /// Ensemble of averaged checkpoints.
    Eoa,
    /// Ensemble of online checkpoints.
    Plain,
}

impl KindArg {
    pub fn to_core(self) -> EnsembleKind {
        match self {
            KindArg::Eoa => EnsembleKind::Eoa,
            KindArg::Plain => EnsembleKind::Plain,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            KindArg::Eoa => "eoa",
            KindArg::Plain => "plain",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

impl OptimizerArg {
    pub fn to_core(self) -> OptimizerKind {
        match self {
            OptimizerArg::Sgd => OptimizerKind::Sgd,
            OptimizerArg::Adam => OptimizerKind::adam(),
        }
    }
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData(args) => commands::gen_data(args),
        Command::Sweep(args) => commands::run_sweep(args),
        Command::AblateT0(args) => commands::run_ablate_t0(args),
        Command::AblateFreq(args) => commands::run_ablate_freq(args),
        Command::Ensemble(args) => commands::run_ensemble(args),
        Command::Diag(DiagCommand::Rankcorr(args)) => commands::run_rankcorr(args),
        Command::Diag(DiagCommand::Crossrun(args)) => commands::run_crossrun(args),
        Command::Diag(DiagCommand::Biasvar(args)) => commands::run_biasvar(args),
        Command::Diag(DiagCommand::Taylor(args)) => commands::run_taylor(args),
        Command::Diag(DiagCommand::Stability(args)) => commands::run_stability(args),
    }
}

/// Usage and configuration problems exit 2; everything else exits 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<tailavg_core::Error>() {
        Some(
            tailavg_core::Error::InvalidConfig(_)
            | tailavg_core::Error::Parse { .. }
            | tailavg_core::Error::UnknownDomain(_),
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
