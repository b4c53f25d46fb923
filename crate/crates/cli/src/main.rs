//! `parn`: train, evaluate and inspect position-aware relation networks.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Few-shot classification with position-aware relation networks.
///
/// Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
/// 3 numeric abort.
#[derive(Debug, Parser)]
#[command(name = "parn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model episodically; writes checkpoint, metrics, manifest and the resolved config.
    Train(RunArgs),
    /// Evaluate a checkpoint on test episodes and append a results row.
    Eval(EvalArgs),
    /// Run the finite-difference gradient check over every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Write the cross and self attention maps of a sample and a query image.
    InspectAttention(InspectArgs),
    /// Print the layer-by-layer parameter manifest for a configuration.
    Manifest(RunArgs),
}

/// Options shared by every configurable command.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for episode sampling and initialization.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "parn-out")]
    pub out: PathBuf,
    /// Dataset root directory.
    #[arg(long, value_name = "DIR")]
    pub dataset_root: Option<PathBuf>,
    /// Classes per episode.
    #[arg(long)]
    pub way: Option<usize>,
    /// Labeled samples per class.
    #[arg(long)]
    pub shot: Option<usize>,
    /// Training episodes (train) or test episodes (eval).
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Evaluation worker threads.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint written by `parn train`.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Random instances per op.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Seed for the random instances.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Scale the backward pass of this op, to demonstrate detection.
    #[arg(long, value_name = "OP")]
    pub corrupt_op: Option<String>,
    /// Check only these ops; repeatable.
    #[arg(long = "op", value_name = "OP")]
    pub only: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Sample (support) image.
    #[arg(long, value_name = "IMAGE")]
    pub sample: PathBuf,
    /// Query image.
    #[arg(long, value_name = "IMAGE")]
    pub query: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::InspectAttention(a) => commands::inspect_attention(&a),
        Command::Manifest(a) => commands::manifest(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
