//! `ctxlm`: generate corpora, train and evaluate context-conditioned LSTM
//! language models, and run the analysis experiments.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctxlm::corpus::{CorpusError, GeneratorError};
use ctxlm::evaluation::EvalError;
use ctxlm::models::ModelError;
use ctxlm::training::TrainError;

/// A problem with the invocation or its configuration (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(
    name = "ctxlm",
    version,
    about = "Context-conditioned LSTM language models"
)]
struct Cli {
    /// Root directory for run outputs
    #[arg(long, global = true, env = "CTXLM_OUT_ROOT", default_value = "runs")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic corpus with planted context effects
    Generate(commands::GenerateArgs),
    /// Train one model; writes a checkpoint, the dev curve and a test report
    Train(commands::TrainArgs),
    /// Perplexity report of a checkpoint on a corpus split
    Eval(commands::EvalArgs),
    /// Train on true and on shuffled contexts and compare
    Ablate(commands::AblateArgs),
    /// Probability of a word as one context field varies
    Sweep(commands::SweepArgs),
    /// Attention weights over the context set while reading an utterance
    Trace(commands::TraceArgs),
    /// Repeat a training run over several seeds and report confidence intervals
    Ci(commands::CiArgs),
    /// Rerun a command from its manifest
    Replay(commands::ReplayArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let root = &cli.out_root;
    match cli.command {
        Command::Generate(a) => commands::generate(root, a),
        Command::Train(a) => commands::train(root, a),
        Command::Eval(a) => commands::eval(root, a),
        Command::Ablate(a) => commands::ablate(root, a),
        Command::Sweep(a) => commands::sweep(root, a),
        Command::Trace(a) => commands::trace(root, a),
        Command::Ci(a) => commands::ci(root, a),
        Command::Replay(a) => commands::replay(root, a),
    }
}

fn is_config_model_error(e: &ModelError) -> bool {
    matches!(e, ModelError::Config(_) | ModelError::NoAttention)
}

fn is_config_train_error(e: &TrainError) -> bool {
    match e {
        TrainError::Config(_) | TrainError::NoData => true,
        TrainError::Model(m) => is_config_model_error(m),
        _ => false,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|cause| {
        if cause.is::<UsageError>() || cause.is::<GeneratorError>() {
            return true;
        }
        if let Some(e) = cause.downcast_ref::<CorpusError>() {
            return matches!(e, CorpusError::BadRatios(_) | CorpusError::TooSmall(_));
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return is_config_model_error(e);
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return is_config_train_error(e);
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return match e {
                EvalError::Model(m) => is_config_model_error(m),
                EvalError::Train(t) => is_config_train_error(t),
                _ => true,
            };
        }
        false
    });
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
