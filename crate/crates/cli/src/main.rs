//! Unified command-line entry point.
//!
//! Exit codes: 0 success, 1 configuration/runtime error, 2 usage error.

mod commands;
mod manifest;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "holon",
    version,
    about = "Part-whole hierarchy representation learning on synthetic structured images",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with landmark ground truth.
    Synthgen(SynthgenArgs),
    /// Run the coarse-to-fine self-distillation pretraining.
    Pretrain(PretrainArgs),
    /// Zero-shot analyses over a frozen checkpoint.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Fine-tune a checkpoint on a synthetic transfer task.
    Transfer(TransferArgs),
    /// Aggregate eval/transfer outputs into a markdown report.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthgenArgs {
    /// Output directory for images and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Number of images to generate.
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 224)]
    size: usize,
    /// Number of landmark classes.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Nesting depth of the generated structure.
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// Pixel noise level in [0, 1].
    #[arg(long, default_value_t = 0.05)]
    noise: f32,
}

#[derive(Args)]
struct PretrainArgs {
    /// Corpus directory produced by `synthgen`.
    #[arg(long, required_unless_present = "print_config")]
    corpus: Option<PathBuf>,
    /// JSON training configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for metrics, checkpoints, and the run manifest.
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the default configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Landmark clustering: per-class intra-cluster distances + silhouette.
    Localize(LocalizeArgs),
    /// Whole-vs-aggregated-parts cosine similarity.
    Compose(ComposeArgs),
    /// Embedding interpolation/extrapolation fidelity.
    Interp(InterpArgs),
    /// Sliding-window landmark matching between two corpus images.
    Match(MatchArgs),
}

#[derive(Args)]
struct EvalCommon {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LocalizeArgs {
    #[command(flatten)]
    common: EvalCommon,
    /// Base landmark patch side; level l uses patch/2^(l-1).
    #[arg(long, default_value_t = 96)]
    patch: usize,
    /// Comma-separated extraction levels.
    #[arg(long, default_value = "1", value_delimiter = ',')]
    levels: Vec<u32>,
    /// Compare raw (un-normalized) embeddings.
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Args)]
struct ComposeArgs {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    /// Comma-separated part counts.
    #[arg(long, default_value = "2,3,4", value_delimiter = ',')]
    parts: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InterpArgs {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    /// Comma-separated interpolation factors in [0, 1].
    #[arg(long = "t", default_value = "0.25,0.5,0.75", value_delimiter = ',')]
    t_values: Vec<f64>,
    /// Patch side embedded around each point.
    #[arg(long, default_value_t = 96)]
    patch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MatchArgs {
    #[command(flatten)]
    common: EvalCommon,
    /// Corpus index of the query image (landmarks come from its labels).
    #[arg(long, default_value_t = 0)]
    query: usize,
    /// Corpus index of the key image.
    #[arg(long, default_value_t = 1)]
    key: usize,
    #[arg(long, default_value_t = 96)]
    window: usize,
    #[arg(long, default_value_t = 16)]
    stride: usize,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// JSON task file: {"schema":1,"kind":"segmentation","corpus":"DIR"}.
    #[arg(long)]
    task: PathBuf,
    #[arg(long, default_value_t = 6)]
    shots: usize,
    /// Comma-separated fine-tuning seeds.
    #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint for the comparison run, or the literal `random` for a
    /// randomly initialized encoder.
    #[arg(long)]
    baseline_ckpt: Option<String>,
    #[arg(long, default_value_t = 30)]
    epochs: u32,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding eval/transfer JSON outputs.
    #[arg(long)]
    run: PathBuf,
    /// Output markdown path (defaults to RUN/report.md).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synthgen(args) => commands::synthgen(args),
        Command::Pretrain(args) => commands::pretrain(args),
        Command::Eval(cmd) => match cmd {
            EvalCommand::Localize(args) => commands::eval_localize(args),
            EvalCommand::Compose(args) => commands::eval_compose(args),
            EvalCommand::Interp(args) => commands::eval_interp(args),
            EvalCommand::Match(args) => commands::eval_match(args),
        },
        Command::Transfer(args) => commands::transfer(args),
        Command::Report(args) => commands::report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
