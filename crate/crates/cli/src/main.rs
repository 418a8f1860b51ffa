//! `tara`: train, compose, generate and analyse token-aware adapters on the
//! toy diffusion model.
//!
//! Exit codes: 0 success, 1 gradient check failure or internal error,
//! 2 configuration or input error, 3 training divergence.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::ConfigError;

#[derive(Parser, Debug)]
#[command(name = "tara", version, about = "Token-aware LoRA on a toy latent-diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON or TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Vocabulary written by `make-vocab`; otherwise rebuilt from the config.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Seed for this command; falls back to the config file, then TARA_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the vocabulary embedding table.
    MakeVocab(MakeVocabArgs),
    /// Train one concept adapter.
    Train(TrainArgs),
    /// Sample with a set of adapters composed.
    Generate(GenerateArgs),
    /// Sample each adapter alone and all together, and measure interference.
    ComposeCheck(ComposeArgs),
    /// Build reports from a run directory.
    Analyze(AnalyzeArgs),
    /// Check objective gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct MakeVocabArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    /// Embedding width (defaults to the model's d_text).
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Tara,
    DbLora,
    Rob,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Concept as NAME=RARE:CLASS, e.g. `mydog=<v1>:dog`.
    #[arg(long)]
    concept: String,
    /// Run directory for the adapter, loss curve and manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "tara")]
    method: MethodArg,
    /// Cap on optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Use the fast toy-scale schedule (Adam, larger step, fewer epochs).
    #[arg(long)]
    desk_scale: bool,
    /// Seed of the synthetic reference set (defaults to the command seed).
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Adapter files, composed in the order given.
    #[arg(long = "adapter")]
    adapters: Vec<PathBuf>,
    /// JSON registry listing adapter files; appended after `--adapter`s.
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ComposeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long = "adapter", required = true)]
    adapters: Vec<PathBuf>,
    /// Prompt; defaults to "a <v1> class1 and a <v2> class2 ...".
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// Label recorded in the interference report.
    #[arg(long, default_value = "tara")]
    label: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Tokens,
    Attention,
    Interference,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    /// Run directories; interference mode accepts several compose-check runs.
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, value_enum)]
    mode: Mode,
    /// Sampler step indices `START..END` to aggregate (default: all).
    #[arg(long)]
    step_range: Option<String>,
    #[arg(long)]
    top_fraction: Option<f64>,
    /// Report directory (default: `<run>/analysis`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// Scale matmul adjoints to check that failures are detected.
    #[arg(long, hide = true)]
    corrupt_adjoint: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<tara_core::Error>() {
            use tara_core::Error as E;
            return match e {
                E::Divergence { .. } => 3,
                E::Shape { .. } | E::NonFinite(_) | E::NotScalar { .. } | E::DataLength { .. } => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeVocab(a) => commands::make_vocab(a),
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a),
        Command::ComposeCheck(a) => commands::compose_check(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
