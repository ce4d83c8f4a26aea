mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::Overrides;

/// Synthetic text recognition with masked visual-linguistic pretraining.
#[derive(Debug, Parser)]
#[command(name = "textrecon", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset (images plus manifest.tsv).
    GenData(GenDataArgs),
    /// Pretrain and/or fine-tune a model.
    Train(TrainArgs),
    /// Word accuracy of a checkpoint on a dataset, overall and per corruption.
    Eval(EvalArgs),
    /// Write ground truth / masked input / reconstruction panels.
    Reconstruct(ReconstructArgs),
    /// Print the query-to-context allow grid for one factorization order.
    Masks(MasksArgs),
    /// Print the effective run configuration as TOML.
    Config(ConfigArgs),
}

#[derive(Debug, clap::Args)]
struct GenDataArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write label-disjoint subdirectories instead, e.g. train=10000,test=1000
    #[arg(long)]
    splits: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PhaseArg {
    Mvlr,
    Finetune,
    Both,
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    /// Dataset directory written by gen-data
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and train.log
    #[arg(long)]
    out: PathBuf,
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Which phases to run; finetune without --resume trains from scratch
    #[arg(long, value_enum, default_value_t = PhaseArg::Both)]
    phase: PhaseArg,
    /// Continue from a checkpoint written by train
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many optimizer steps in this invocation and save a
    /// resumable checkpoint
    #[arg(long)]
    stop_after: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, clap::Args)]
struct EvalArgs {
    /// Dataset directory written by gen-data
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Greedy decoding only
    #[arg(long)]
    no_refine: bool,
    /// Refinement passes after the greedy draft
    #[arg(long, default_value_t = 1)]
    refine_iters: usize,
    /// Write one tab-separated record per sample here
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct ReconstructArgs {
    /// Dataset directory written by gen-data
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of images, taken from the start of the manifest
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Output directory for the panel images
    #[arg(long)]
    out: PathBuf,
    /// Patch masking ratio [default: the checkpoint's r_v]
    #[arg(long)]
    r_v: Option<f64>,
    /// Seed for the patch and character masks
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, clap::Args)]
struct MasksArgs {
    /// Label length L
    #[arg(long)]
    len: usize,
    /// Factorization order: identity, reverse or seed:<k>
    #[arg(long, default_value = "identity")]
    perm: String,
    /// Comma-separated masked character positions in 1..=L
    #[arg(long, default_value = "")]
    masked: String,
    /// Refinement mask (each query hides its own character) instead of the
    /// permuted one
    #[arg(long)]
    cloze: bool,
}

#[derive(Debug, clap::Args)]
struct ConfigArgs {
    /// TOML run configuration to start from
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Masks(a) => commands::masks(a),
        Command::Config(a) => commands::show_config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let usage = e.downcast_ref::<commands::UsageError>().is_some();
            eprintln!("error: {e:#}");
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
