//! Command line front end: dataset generation, training, evaluation,
//! inference and the annotation service.

pub mod commands;
pub mod error;
pub mod server;
pub mod sim;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "uranker", version, about = "Underwater image ranking and enhancement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Config file plus `--set key=value` overrides, applied in that order.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` file or JSON object.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset of ranked groups and enhancement pairs.
    MakeSynth {
        #[arg(long)]
        groups: usize,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Side length of the square images.
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Skip the enhancement pairs.
        #[arg(long)]
        no_pairs: bool,
    },
    /// Train the quality ranker.
    TrainRanker {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Train on this many groups and record the rest as the test split.
        #[arg(long)]
        train_groups: Option<usize>,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
    },
    /// Mean per-group SRCC and KRCC of a ranker checkpoint.
    EvalRanker {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Evaluate only the test groups of this split file.
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Train the enhancement network on the dataset's pairs.
    TrainUie {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Weight of the ranker loss; overrides the config.
        #[arg(long)]
        lambda: Option<f64>,
        /// Frozen ranker checkpoint, needed when lambda > 0.
        #[arg(long)]
        ranker: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// PSNR and SSIM of an enhancement checkpoint on the dataset's pairs.
    EvalUie {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Enhance one PNG.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the quality score of one PNG.
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Rank correlations between predicted scores and ground-truth ranks.
    ScoreMetrics {
        /// JSON object: group id -> scores (higher is better).
        #[arg(long)]
        pred: PathBuf,
        /// JSON object: group id -> ranks (1 is best).
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Serve the annotation API.
    AnnotateServe {
        #[arg(long)]
        data: Option<PathBuf>,
        /// 0 picks a free port; the bound address is printed.
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Event log; defaults to `<data>/annotation/events.jsonl`, or memory
        /// only without a dataset.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run oracle voters against a running server.
    AnnotateSim {
        #[arg(long)]
        voters: PathBuf,
        /// Overrides the spec's server URL.
        #[arg(long)]
        server: Option<String>,
    },
}

/// Caps the global rayon pool from `URANKER_NUM_WORKERS`.
pub fn init_workers() -> CliResult<()> {
    let Ok(v) = std::env::var("URANKER_NUM_WORKERS") else {
        return Ok(());
    };
    let n: usize = uranker::runconfig::parse_num("URANKER_NUM_WORKERS", &v)?;
    if n == 0 {
        return Err(uranker::Error::Config("URANKER_NUM_WORKERS must be positive".into()).into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| uranker::Error::Config(e.to_string()))?;
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    init_workers()?;
    commands::dispatch(cli.command)
}
