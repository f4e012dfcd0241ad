mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<intentfill::Error> for CliError {
    fn from(e: intentfill::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

/// Dual-intent inpainting: data synthesis, training, inference, evaluation and serving.
#[derive(Debug, Parser)]
#[command(name = "intentfill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a procedural dataset directory.
    Synth(SynthArgs),
    /// Run training stage 1 or 2.
    Train(TrainArgs),
    /// Inpaint one image with a ternary intent PNG.
    Inpaint(InpaintArgs),
    /// Score a checkpoint on an evaluation dataset with the palette oracle.
    Eval(EvalArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML or JSON run config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// train, removal, creation or mixed.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub stage: Option<u8>,
    /// Stage-1 checkpoint to continue from; required for stage 2.
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
    /// Output directory for the checkpoint, snapshots and logs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fixed training pool written by `synth --kind train`; procedural if absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Log every n-th step to standard error.
    #[arg(long)]
    pub log_every: Option<u64>,
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GuidanceArgs {
    #[arg(long)]
    pub w: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// ddim or ddpm.
    #[arg(long)]
    pub sampler: Option<String>,
}

#[derive(Debug, Args)]
pub struct InpaintArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// RGB input image.
    pub image: Option<PathBuf>,
    /// Grayscale intent: 0 remove, 128 keep, 255 create.
    pub intent: Option<PathBuf>,
    /// Output PNG path.
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// removal, creation or mixed.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report path; the report is also printed to standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Evaluate only the first n samples.
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub max_queue: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Inpaint(a) => commands::inpaint(a),
        Command::Eval(a) => commands::eval(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = match e {
                CliError::Usage(_) => (1, "usage"),
                CliError::Runtime(_) => (2, "runtime"),
            };
            commands::log("error", serde_json::json!({ "kind": kind, "message": e.to_string() }));
            ExitCode::from(code)
        }
    }
}
