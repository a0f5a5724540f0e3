//! Command-line interface for graph convolutional deep kernel machines:
//! training, NNGP baselines, the linear analytic demo, nu sweeps and
//! checkpoint evaluation. Set `GDKM_LOG` (error/warn/info/debug) for logs.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<gdkm::dataio::DataError> for CliError {
    fn from(e: gdkm::dataio::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<gdkm::dkm::DkmError> for CliError {
    fn from(e: gdkm::dkm::DkmError) -> Self {
        use gdkm::dkm::DkmError as E;
        match e {
            E::Io(_) | E::CorruptCheckpoint(_) | E::DimensionMismatch(_) => {
                CliError::Data(e.to_string())
            }
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<gdkm::train::TrainError> for CliError {
    fn from(e: gdkm::train::TrainError) -> Self {
        use gdkm::train::TrainError as E;
        match e {
            E::Config(m) => CliError::Config(m),
            E::Data(d) => d.into(),
            E::Dkm(d) => d.into(),
            E::Numerics(n) => CliError::Numeric(n.to_string()),
            E::Kernel(k) => CliError::Numeric(k.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("io error: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "gdkm",
    about = "Graph convolutional deep kernel machines: train, sweep, analyze",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a sparse graph convolutional DKM on a dataset directory.
    Train(TrainArgs),
    /// Train only the variational head over the fixed NNGP kernel stack
    /// (all layer regularizations forced to nu = inf).
    Nngp(TrainArgs),
    /// Linear-kernel analytic demo: closed-form Gram matrices vs gradient
    /// descent on a seeded Erdos-Renyi dataset, plus CKA tables.
    LinearDemo(LinearDemoArgs),
    /// Sweep regularization strengths and inducing schemes over seeds.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint on a dataset: accuracies and kernel alignment.
    Eval(EvalArgs),
    /// Generate a synthetic node-classification dataset directory.
    MakeSynth(MakeSynthArgs),
}

/// Flags mirror the run-config JSON; any flag overrides the file value.
#[derive(Args, Clone)]
pub struct TrainArgs {
    /// JSON run config; flags below override individual fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (features.csv, edges.txt, labels.csv, splits.json)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoint, metrics and final accuracies
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Random seed controlling every stochastic choice of the run
    #[arg(long)]
    pub seed: Option<u64>,
    /// Full-batch training epochs (one gradient step each)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Evaluate accuracies every N epochs
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Number of Gram layers
    #[arg(long)]
    pub depth: Option<usize>,
    /// Layer regularization strength: non-negative number or "inf"
    #[arg(long, value_parser = config::parse_nu)]
    pub nu: Option<gdkm::dkm::Nu>,
    /// Base kernel: arccos | linear
    #[arg(long)]
    pub kernel: Option<String>,
    /// Test-test block propagation: nystrom | exact
    #[arg(long)]
    pub gtt: Option<String>,
    /// Inducing scheme: inter | intra
    #[arg(long)]
    pub scheme: Option<String>,
    /// Number of inducing points
    #[arg(long)]
    pub inducing: Option<usize>,
    /// Identity interpolation of the adjacency, between 0 and 1
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Feature scaling: sum_squares | norm | none
    #[arg(long)]
    pub scaling: Option<String>,
    /// Enable the kernel centering layer
    #[arg(long)]
    pub centering: Option<bool>,
    /// Learn affine (gamma, beta) centering parameters
    #[arg(long)]
    pub learn_affine: Option<bool>,
    /// Monte-Carlo samples per training step
    #[arg(long)]
    pub mc_train: Option<usize>,
    /// Monte-Carlo samples at evaluation
    #[arg(long)]
    pub mc_eval: Option<usize>,
    /// Learning-rate schedule: two_stage | polynomial | constant
    #[arg(long)]
    pub lr_schedule: Option<String>,
    /// Base (starting) learning rate of the two-stage schedule
    #[arg(long)]
    pub lr_base: Option<f64>,
    /// Peak learning rate reached after warmup
    #[arg(long)]
    pub lr_peak: Option<f64>,
    /// Final learning rate of the cosine stage
    #[arg(long)]
    pub lr_floor: Option<f64>,
    /// Warmup fraction of the two-stage schedule
    #[arg(long)]
    pub lr_warm_fraction: Option<f64>,
    /// Initial learning rate (polynomial/constant schedules)
    #[arg(long)]
    pub lr_init: Option<f64>,
    /// Decay power of the polynomial schedule
    #[arg(long)]
    pub lr_power: Option<f64>,
    /// For fold-based datasets: train on every fold (default) or fold 0 only
    #[arg(long)]
    pub all_folds: Option<bool>,
}

#[derive(Args)]
pub struct LinearDemoArgs {
    /// Number of graph nodes
    #[arg(long, default_value_t = 50)]
    pub nodes: usize,
    /// Edge probability of the Erdos-Renyi graph
    #[arg(long, default_value_t = 0.1)]
    pub edge_prob: f64,
    /// Number of Gram layers
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated lambda grid for the CKA table
    #[arg(long, default_value = "0.1,0.3,0.5,1.0")]
    pub lambda_grid: String,
    /// Lambda used for the gradient-descent confirmation
    #[arg(long, default_value_t = 0.5)]
    pub gd_lambda: f64,
    /// Gradient-descent epochs (0 skips the confirmation)
    #[arg(long, default_value_t = 10000)]
    pub gd_epochs: usize,
    /// Jitter added to Y Y^T to make the output kernel positive definite
    #[arg(long, default_value_t = 1.0)]
    pub label_jitter: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub base: TrainArgs,
    /// Comma-separated nu grid, e.g. "0,0.01,0.1,1,10,100,1000,inf"
    #[arg(long, default_value = "0,0.01,0.1,1,10,100,1000,inf")]
    pub nu_grid: String,
    /// Comma-separated schemes, e.g. "inter,intra"
    #[arg(long, default_value = "inter,intra")]
    pub schemes: String,
    /// Comma-separated seeds
    #[arg(long, default_value = "0,1,2")]
    pub seeds: String,
    /// Parallel sweep cells
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args)]
pub struct MakeSynthArgs {
    /// Dataset family: heterophilous (Erdos-Renyi structure,
    /// feature-determined labels) or homophilous (planted partition with
    /// label-aligned communities)
    #[arg(long)]
    pub kind: String,
    #[arg(long, default_value_t = 300)]
    pub nodes: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub feature_dim: usize,
    /// Gaussian-mixture class separation of the features
    #[arg(long, default_value_t = 3.0)]
    pub separation: f64,
    /// Edge probability (heterophilous kind)
    #[arg(long, default_value_t = 0.04)]
    pub edge_prob: f64,
    /// Within-community edge probability (homophilous kind)
    #[arg(long, default_value_t = 0.1)]
    pub p_in: f64,
    /// Cross-community edge probability (homophilous kind)
    #[arg(long, default_value_t = 0.01)]
    pub p_out: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Monte-Carlo samples for the predictive probabilities
    #[arg(long)]
    pub mc_samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional output JSON path (results also print to stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GDKM_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => commands::cmd_train(&args, false),
        Command::Nngp(args) => commands::cmd_train(&args, true),
        Command::LinearDemo(args) => commands::cmd_linear_demo(&args),
        Command::Sweep(args) => commands::cmd_sweep(&args),
        Command::Eval(args) => commands::cmd_eval(&args),
        Command::MakeSynth(args) => commands::cmd_make_synth(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let json = serde_json::json!({
                "error": e.message(),
                "kind": e.kind(),
            });
            eprintln!("{json}");
            ExitCode::from(e.exit_code())
        }
    }
}
