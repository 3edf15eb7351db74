//! Command-line front end.
//!
//! Standard output carries only the paths of written files; progress goes to
//! standard error through `log`. Exit codes: 0 success, 1 invalid input,
//! 2 training or runtime failure, 3 experiment finished with failed runs.

mod commands;
pub mod experiment;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::RunConfig;
pub use experiment::{
    build_experiment_vocab, class_count, desk_hyper, general_corpora, load_domains, prepare,
    run_experiment, runs_csv, targets_csv, welch_csv, DataSource, ExperimentConfig,
    ExperimentReport, ModelShape, RunFailure, Scheme, Setup, TargetRow,
};

use crate::error::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_PARTIAL: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    Single,
    Double,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON configuration file for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed override. For `experiment`, seeds become N, N+1, ...
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Maximum number of runs executed in parallel.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, global = true, value_enum, default_value_t = Precision::Single)]
    pub precision: Precision,
}

#[derive(Debug, Parser)]
#[command(
    name = "adauda",
    version,
    about = "Adapter-based unsupervised domain adaptation"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct SchemeArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub source: String,
    /// Comma-separated target domains.
    #[arg(long, value_delimiter = ',')]
    pub targets: Vec<String>,
    /// FULL_FT, FULL_TSA, ADA_FT or ADA_TSA.
    #[arg(long, default_value = "ADA_TSA")]
    pub variant: String,
}

/// A model given either as a full checkpoint or as an adapter bundle on top
/// of a backbone checkpoint.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, conflicts_with_all = ["bundle", "backbone"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, requires = "backbone")]
    pub bundle: Option<PathBuf>,
    #[arg(long, requires = "bundle")]
    pub backbone: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain dataset (config: generator spec).
    GenData,
    /// Run the domain-fusion MLM phase and save the resulting model
    /// (config: run settings).
    PretrainFusion {
        #[command(flatten)]
        scheme: SchemeArgs,
        /// Backbone checkpoint to start from. Without it the backbone is
        /// built as the run settings describe.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Fine-tune on labeled source data (config: run settings).
    Finetune {
        #[command(flatten)]
        scheme: SchemeArgs,
        /// Checkpoint to start from, e.g. the output of `pretrain-fusion`.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Accuracy of a model on labeled splits.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated domains; all when omitted.
        #[arg(long, value_delimiter = ',')]
        domains: Vec<String>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Vocabulary-overlap similarity between every pair of domains.
    Similarity {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = crate::analysis::DEFAULT_TOP_K)]
        top_k: usize,
    },
    /// Export pooled hidden states and their 2-D projection.
    ProjectHidden {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        domains: Vec<String>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "mean")]
        pooling: String,
        /// Name of this condition, used as the file prefix.
        #[arg(long, default_value = "model")]
        label: String,
    },
    /// Every scheme × variant × seed of an experiment config.
    Experiment,
}

/// Maps an error to the documented exit code.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. }
        | Error::Json(_)
        | Error::Data(_)
        | Error::Io { .. }
        | Error::Checkpoint(_)
        | Error::Fingerprint { .. } => EXIT_INVALID,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code.
pub fn run_from_args<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INVALID)
            } else {
                ExitCode::from(EXIT_OK)
            };
        }
    };
    let result = match cli.common.precision {
        Precision::Single => commands::dispatch::<f32>(&cli),
        Precision::Double => commands::dispatch::<f64>(&cli),
    };
    match result {
        Ok(paths) => {
            for p in &paths.files {
                println!("{}", p.display());
            }
            if paths.partial {
                ExitCode::from(EXIT_PARTIAL)
            } else {
                ExitCode::from(EXIT_OK)
            }
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn main() -> ExitCode {
    run_from_args(std::env::args_os())
}
