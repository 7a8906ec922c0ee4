mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::Failure;

#[derive(Debug, Parser)]
#[command(name = "hazard", version, about = "Patch-autoencoder visual anomaly detection")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: available hardware parallelism).
    #[arg(long, global = true, env = "HAZARD_WORKERS")]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train an autoencoder on the train split of a dataset.
    Train(TrainArgs),
    /// Score frames of one split and write a score CSV.
    Score(ScoreArgs),
    /// Compute overall and per-class AUC from a score CSV or a model.
    Eval(EvalArgs),
    /// Train and evaluate over a grid of scales, sizes and detector settings.
    Sweep(SweepArgs),
    /// Threshold per-frame scores of qualitative sequences.
    Stream(StreamArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_frames: Option<usize>,
    #[arg(long)]
    pub val_frames: Option<usize>,
    #[arg(long)]
    pub test_frames: Option<usize>,
    #[arg(long)]
    pub sequences: Option<usize>,
    #[arg(long)]
    pub sequence_length: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    /// Filters of the first encoder layer (F).
    #[arg(long)]
    pub first_layer_size: Option<usize>,
    /// Bottleneck width (B).
    #[arg(long)]
    pub bottleneck_size: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct TrainingFlags {
    /// Total training patches.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub samples_per_epoch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seed for initialization and patch sampling.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct DetectorFlags {
    /// Downsampling factor: 1, 2, 4 or 8.
    #[arg(long)]
    pub scale: Option<u32>,
    /// Patches per frame (N_p); defaults to 1 at scale 8 and 250 otherwise.
    #[arg(long)]
    pub patch_count: Option<usize>,
    /// `mean` or `q<q>` such as `q0.75`.
    #[arg(long)]
    pub aggregation: Option<String>,
    #[arg(long)]
    pub detector_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub scale: Option<u32>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub training: TrainingFlags,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// train, val, test or qual.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Also write the individual patch scores.
    #[arg(long)]
    pub patch_scores: bool,
    #[command(flatten)]
    pub detector: DetectorFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Score CSV from `score`; otherwise `--data` and `--model` are scored.
    #[arg(long, conflicts_with_all = ["data", "model"])]
    pub scores: Option<PathBuf>,
    #[arg(long, requires = "model")]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub detector: DetectorFlags,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Dataset manifests; several give a per-dataset table with an average.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',')]
    pub first_layer_sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub bottleneck_sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub patch_counts: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub aggregations: Option<Vec<String>>,
    #[command(flatten)]
    pub training: TrainingFlags,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Sequence id; all sequences when omitted.
    #[arg(long)]
    pub sequence: Option<String>,
    /// Alarm threshold in score units.
    #[arg(long, conflicts_with = "percentile")]
    pub threshold: Option<f64>,
    /// Calibrate the threshold at this percentile of validation scores.
    #[arg(long)]
    pub percentile: Option<f64>,
    #[command(flatten)]
    pub detector: DetectorFlags,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    let workers = if config.workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        config.workers
    };
    hazard_core::par::with_workers(workers, move || commands::dispatch(cli.command, config))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hazard: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
