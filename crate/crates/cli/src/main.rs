//! Command-line front end: training, fine-tuning, few-shot, LOOCV and
//! ablation runs, evaluation, data validation and synthetic data.

mod commands;
mod run;
mod setup;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use misinfo_mtl::training::Adaptation;

/// Bad flags, config keys or missing inputs; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed to run; repeat for several. Defaults to 1, 2 and 3.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output root; runs go to `<out>/<command>-<digest>`.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Overwrite an existing run directory for the same configuration.
    #[arg(long)]
    force: bool,
}

#[derive(Parser, Debug)]
#[command(name = "misinfo-mtl", version, about = "Multi-task misinformation classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Stage 1: joint training on every task in the config.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 2: fine-tune one task of a trained checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file, or a run directory with per-seed checkpoints.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
    },
    /// Train a new head for an unseen task from k examples.
    Fewshot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// full_model or head_only.
        #[arg(long, default_value = "full_model")]
        mode: Adaptation,
        /// Start from a freshly initialized encoder instead of the checkpoint's.
        #[arg(long)]
        fresh: bool,
    },
    /// Leave-one-event-out cross-validation on an event-tagged task.
    Loocv {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "rumor")]
        task: String,
    },
    /// Train on task combinations and evaluate one task.
    Ablation {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eval_task: String,
        /// Comma-separated task subset; repeat for each row.
        #[arg(long = "subset")]
        subsets: Vec<String>,
    },
    /// Evaluate a checkpoint on one task.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        /// train, validation, test or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Check every dataset in the config and print class counts.
    ValidateData {
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic task suite and a matching config to `--out`.
    GenSynthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        tasks: usize,
        #[arg(long, default_value_t = 200)]
        examples: usize,
        #[arg(long, default_value_t = 200)]
        unseen_examples: usize,
        #[arg(long, default_value_t = 0.9)]
        p_shared: f64,
        /// Tag the first task's examples with this many events.
        #[arg(long, default_value_t = 0)]
        events: usize,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use misinfo_mtl::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            match e {
                E::Config { .. } | E::UnknownTask(_) | E::DuplicateTask(_) => return 2,
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => return 2,
                _ => {}
            }
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { common } => commands::train(common),
        Command::Finetune { common, checkpoint, task } => commands::finetune(common, checkpoint, task),
        Command::Fewshot { common, checkpoint, task, k, mode, fresh } => {
            commands::fewshot(common, checkpoint.as_deref(), task, *k, *mode, *fresh)
        }
        Command::Loocv { common, task } => commands::loocv(common, task),
        Command::Ablation { common, eval_task, subsets } => commands::ablation(common, eval_task, subsets),
        Command::Eval { common, checkpoint, task, split } => commands::eval(common, checkpoint, task, split),
        Command::ValidateData { common } => commands::validate_data(common),
        Command::GenSynthetic { common, tasks, examples, unseen_examples, p_shared, events } => {
            let opts = commands::SyntheticOptions {
                tasks: *tasks,
                examples: *examples,
                unseen_examples: *unseen_examples,
                p_shared: *p_shared,
                events: *events,
            };
            commands::gen_synthetic(common, &opts)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
