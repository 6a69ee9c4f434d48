//! `pretr`: data preparation, training, evaluation, ablation, benchmarking
//! and the masked-token density study.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures print a
//! single `error[<category>]: <message>` line on stderr.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Usage problems: bad flags, unknown config keys, conflicting settings, missing inputs.
#[derive(Debug)]
pub struct UsageError(pub String);

pub enum CliError {
    Usage(UsageError),
    Runtime(pretr::Error),
}

impl From<UsageError> for CliError {
    fn from(e: UsageError) -> Self {
        CliError::Usage(e)
    }
}

impl From<pretr::Error> for CliError {
    fn from(e: pretr::Error) -> Self {
        CliError::Runtime(e)
    }
}

/// Environment variable naming the annotation root when `--data` is absent.
pub const DATA_ROOT_ENV: &str = "PRETR_ETH_UCY_ROOT";

#[derive(Parser, Debug)]
#[command(name = "pretr", version, about = "Parallel-decoding trajectory transformer toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Key-value config file applied over the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Root seed; every random stream derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory receiving every artifact of the run.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Annotation root holding one `<dataset>.txt` file or directory per source.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Use the generated synthetic corpus instead of annotation files.
    #[arg(long, global = true)]
    pub synthetic: bool,
    /// Scene archives written by `prepare`, used instead of rebuilding folds.
    #[arg(long, global = true)]
    pub scenes: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build every leave-one-out fold, write scene archives and corpus statistics.
    Prepare,
    /// Train on one fold (or `all`) and score the held-out source.
    Train {
        /// Held-out source (`eth`, `hotel`, `univ`, `zara1`, `zara2`) or `all`.
        #[arg(long, default_value = "eth")]
        fold: String,
    },
    /// Score a checkpoint on the held-out source of a fold.
    Eval {
        /// Held-out source or `all`.
        #[arg(long, default_value = "eth")]
        fold: String,
        /// Checkpoint file; for `--fold all`, a directory holding `<fold>/best.ckpt`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and score every attention-order variant on every fold.
    Ablate {
        /// Comma-separated held-out sources or `all`.
        #[arg(long, default_value = "all")]
        folds: String,
        /// Comma-separated attention orders.
        #[arg(long, default_value = "ts,st,agg_ts")]
        variants: String,
        /// Comma-separated training seeds; defaults to the root seed alone.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Decode latency of parallel and autoregressive models.
    Bench {
        /// `parallel`, `ar` or both.
        #[arg(long, default_value = "parallel,ar")]
        modes: String,
        /// Prediction horizons in steps.
        #[arg(long, value_delimiter = ',', default_value = "12,24")]
        horizons: Vec<usize>,
        /// `divided`, `merged` or both.
        #[arg(long, default_value = "divided")]
        layouts: String,
        /// `infer`, `train` or both.
        #[arg(long, default_value = "infer,train")]
        kinds: String,
        /// Also sweep the attention kernels over agent count and horizon.
        #[arg(long)]
        scaling: bool,
    },
    /// Fit the token grid and train the masked token model.
    CommaTrain,
    /// Attention density ratio of a trained token model at each masking rate.
    CommaR {
        /// Token model written by `comma-train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(UsageError(msg))) => {
            eprintln!("error[usage]: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e @ pretr::Error::Config(_))) => {
            eprintln!("error[usage]: {e}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
