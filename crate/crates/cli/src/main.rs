//! `fqe-infer`: fitted Q-evaluation, variance, bounds, bootstrap intervals and
//! validation studies from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fqe_core::Error;

#[derive(Parser)]
#[command(name = "fqe-infer", version, about = "Fitted Q-evaluation with bootstrap and asymptotic inference")]
#[command(after_help = "Set FQE_THREADS to fix the worker thread count.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample K episodes from an MDP under a behavior policy.
    GenData(GenDataArgs),
    /// Fit FQE on a dataset and print the value estimate.
    Fqe(FqeArgs),
    /// Plug-in asymptotic variance and divergence diagnostics for an estimate.
    Variance(VarianceArgs),
    /// Leading-order finite-sample error bounds for an estimate.
    Bounds(BoundsArgs),
    /// Bootstrap confidence interval for the policy value.
    BootstrapCi(BootstrapArgs),
    /// Normality of standardized errors across replications.
    StudyNormality(StudyArgs),
    /// Bootstrap interval coverage across replications.
    StudyCoverage(StudyArgs),
    /// Scaled Monte-Carlo variance against the asymptotic variance.
    StudyCr(StudyArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// MDP file (TOML).
    #[arg(long)]
    mdp: PathBuf,
    /// Behavior policy file (TOML).
    #[arg(long)]
    behavior: PathBuf,
    #[arg(long)]
    episodes: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Tabular,
    Linear,
    SmoothNet,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "tabular")]
    family: FamilyArg,
    /// Hidden width of the smooth network.
    #[arg(long, default_value_t = 3)]
    width: usize,
    /// Ridge coefficient λ of the stage objective.
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Dimension of seeded Gaussian features, used when the MDP file has no feature table.
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    feature_seed: u64,
}

#[derive(Args)]
struct Inputs {
    #[arg(long)]
    mdp: PathBuf,
    /// Target policy file (TOML).
    #[arg(long)]
    target: PathBuf,
    /// Dataset file (CSV).
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct FqeArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    model: ModelArgs,
    /// Where to write the estimate (TOML).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VarianceArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    model: ModelArgs,
    /// Estimate written by `fqe`.
    #[arg(long)]
    estimate: PathBuf,
    /// Estimate the target feature means from this many rollouts instead of exactly.
    #[arg(long)]
    nu_rollouts: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundsArgs {
    #[command(flatten)]
    variance: VarianceArgs,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Pairs sampled for the positivity check.
    #[arg(long, default_value_t = 10_000)]
    positivity_pairs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Vanilla,
    Exponential,
    Gamma,
    Uniform,
}

#[derive(Args, Clone)]
struct SchemeArgs {
    #[arg(long, value_enum, default_value = "vanilla")]
    scheme: SchemeArg,
    /// Exponential multiplier rate.
    #[arg(long, default_value_t = 1.0)]
    rate: f64,
    /// Gamma multiplier shape.
    #[arg(long, default_value_t = 0.5)]
    shape: f64,
    /// Gamma multiplier scale.
    #[arg(long, default_value_t = 2.0)]
    scale: f64,
    /// Uniform multiplier lower end (positive).
    #[arg(long, default_value_t = 0.5)]
    lower: f64,
    /// Uniform multiplier upper end.
    #[arg(long, default_value_t = 1.5)]
    upper: f64,
}

#[derive(Args)]
struct BootstrapArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[arg(long, default_value_t = 200)]
    bootstrap_reps: usize,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long)]
    seed: u64,
    /// Where to write the interval record.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where to write the replicate values, one per line.
    #[arg(long)]
    replicates_out: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    /// Built-in instance name (canonical-a or canonical-b).
    #[arg(long, conflicts_with_all = ["mdp", "behavior", "target"])]
    instance: Option<String>,
    #[arg(long, requires_all = ["behavior", "target"])]
    mdp: Option<PathBuf>,
    #[arg(long)]
    behavior: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated episode counts.
    #[arg(long, value_delimiter = ',', required = true)]
    episodes: Vec<usize>,
    #[arg(long, default_value_t = 1_000)]
    replications: usize,
    #[arg(long, default_value_t = 200)]
    bootstrap_reps: usize,
    /// Comma-separated confidence levels.
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    delta: Vec<f64>,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[arg(long)]
    nu_rollouts: Option<usize>,
    #[arg(long)]
    seed: u64,
    /// Results table (CSV); a `.provenance.toml` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
}

/// Exit status for each error kind; 2 is reserved for usage errors.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 3,
        Error::Format(_) => 4,
        Error::Config(_) => 5,
        Error::Validation(_) => 6,
        Error::Numeric(_) => 7,
        Error::Singular { .. } => 8,
        Error::Inference(_) => 9,
        Error::Study(_) => 10,
    }
}

fn configure_threads() -> fqe_core::Result<()> {
    let Ok(raw) = std::env::var("FQE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("FQE_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Fqe(a) => commands::fqe(&a),
        Command::Variance(a) => commands::variance(&a),
        Command::Bounds(a) => commands::bounds(&a),
        Command::BootstrapCi(a) => commands::bootstrap_ci(&a),
        Command::StudyNormality(a) => commands::study(&a, commands::Study::Normality),
        Command::StudyCoverage(a) => commands::study(&a, commands::Study::Coverage),
        Command::StudyCr(a) => commands::study(&a, commands::Study::CramerRao),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fqe-infer: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
