//! Command-line surface of the pipeline: `generate`, `train`, `evaluate`,
//! `optimize` and `features` over one workspace directory.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use aerorom::cnn::Target;
use aerorom::dataset::Split;
use clap::{Args, Parser, Subcommand};

pub use config::{PipelineConfig, Profile};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<aerorom::Error> for CliError {
    fn from(e: aerorom::Error) -> Self {
        use aerorom::Error as E;
        let msg = e.to_string();
        match e {
            E::Usage(_) => CliError::Usage(msg),
            E::Validation(_) => CliError::Config(msg),
            E::Dimension(_) | E::Format(_) | E::Io(_) | E::Json(_) => CliError::Data(msg),
            E::Solver(_) | E::Numerical(_) => CliError::Numerical(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "aerorom", version, about = "Level-set CNN surrogates for constrained wing optimization")]
pub struct Cli {
    /// JSON configuration file overlaid on the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Default values: `desk` (CPU-sized) or `paper` (reference scale).
    #[arg(long, global = true)]
    pub profile: Option<Profile>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample designs, label them with the full-order solver, write level sets and splits.
    Generate,
    /// Train the surrogate for one target.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Multi-start SQP on the surrogates with full-order verification.
    Optimize(OptimizeArgs),
    /// Export one convolution kernel's feature map for a design.
    Features(FeaturesArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// CL or CDi.
    #[arg(long)]
    pub target: Target,
    /// Override the initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Override the number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub target: Target,
    /// Defaults to the workspace checkpoint of the target.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Override the number of starts drawn from the test split.
    #[arg(long)]
    pub starts: Option<usize>,
    /// Override the SQP iteration limit.
    #[arg(long)]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub target: Target,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset record id of the design.
    #[arg(long, conflicts_with = "design_json")]
    pub design_id: Option<usize>,
    /// JSON array of 33 design values (angles in degrees).
    #[arg(long)]
    pub design_json: Option<PathBuf>,
    /// 1-based convolution block index.
    #[arg(long)]
    pub layer: usize,
    /// 1-based kernel index within the block.
    #[arg(long)]
    pub kernel: usize,
}

/// Resolve the configuration and run the chosen command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let env = std::env::var_os(config::WORKSPACE_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from);
    let cfg = PipelineConfig::resolve(cli.config.as_deref(), cli.profile, cli.seed, env)?;
    let exec = match cli.jobs {
        Some(0) => return Err(CliError::Usage("--jobs must be at least 1".into())),
        Some(1) => aerorom::exec::Exec::Sequential,
        Some(n) => {
            // the global pool can only be configured once per process
            let _ = aerorom::exec::set_threads(n);
            aerorom::exec::Exec::Parallel
        }
        None => aerorom::exec::Exec::default(),
    };
    match cli.command {
        Command::Generate => commands::generate(&cfg, exec).map(|_| ()),
        Command::Train(a) => commands::train(&cfg, &a, exec).map(|_| ()),
        Command::Evaluate(a) => commands::evaluate(&cfg, &a, exec).map(|_| ()),
        Command::Optimize(a) => commands::optimize(&cfg, &a, exec).map(|_| ()),
        Command::Features(a) => commands::features(&cfg, &a),
    }
}
