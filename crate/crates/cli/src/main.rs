//! `dcsau`: cost summaries, training, evaluation, prediction and the
//! numerical self-test for DCSAU-Net and its ablation variants.
//!
//! Exit codes: 0 success, 1 self-test failure, 2 configuration error,
//! 3 data error, 4 numeric divergence. Environment variables are never read.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::ModelArgs;

#[derive(Parser)]
#[command(name = "dcsau", version, about = "DCSAU-Net segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print per-layer parameter and MAC counts for one input.
    Summary(SummaryArgs),
    /// Train on a manifest or on generated shapes.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Write predicted masks for images.
    Predict(PredictArgs),
    /// Run the oracle, gradient and invariant checks.
    Selftest(SelftestArgs),
}

#[derive(Args)]
pub struct SummaryArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Input extent as CxHxW; C must be 3.
    #[arg(long, default_value = "3x256x256", value_name = "CxHxW")]
    pub input: String,
    /// Also write the report as JSON to this file.
    #[arg(long, value_name = "PATH")]
    pub json: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Dataset manifest; split into train/valid/test by the seed.
    #[arg(long, value_name = "PATH", conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub manifest: Option<PathBuf>,
    /// Generate N shape images and train and validate on all of them.
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    /// Square side every image is resized to (or generated at).
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Epoch limit [default: 100, unlimited when --steps is given].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Samples per optimizer step (at least 2).
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Random flips, rotations and cutout on training batches.
    #[arg(long)]
    pub augment: bool,
    /// Sigmoid threshold for binary predictions.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Seeds data generation, splitting, initialization and shuffling.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Directory for config.json, log.jsonl, best.ckpt and final.ckpt.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Weights written by `train`.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Dataset manifest to score.
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Only score the ids listed one per line in this file.
    #[arg(long, value_name = "PATH")]
    pub ids: Option<PathBuf>,
    /// Resize images to this square side before scoring.
    #[arg(long)]
    pub size: Option<usize>,
    /// Sigmoid threshold for binary predictions.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// JSON report path [default: eval.json beside the checkpoint].
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Weights written by `train`.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Directory that receives one `<stem>.pgm` per image.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Resize images to this square side first.
    #[arg(long)]
    pub size: Option<usize>,
    /// Sigmoid threshold for binary predictions.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// PPM images.
    #[arg(required = true, value_name = "IMAGE")]
    pub images: Vec<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum FaultArg {
    /// Negate the fast convolution's output before the oracle comparison.
    ConvSign,
}

#[derive(Args)]
pub struct SelftestArgs {
    /// Random instances per check family.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Test hook that plants a known bug; the run must then fail.
    #[arg(long, value_name = "FAULT")]
    pub inject_fault: Option<FaultArg>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Summary(a) => commands::summary(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Selftest(a) => commands::selftest(&a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
