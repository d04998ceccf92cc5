//! `duoserve`: trace generation, statistics, predictor training and
//! evaluation, and prefetch-policy simulation.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage error, 3 numeric failure.

mod commands;
mod manifest;
mod model;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use duoserve_core::predictor::{AffinityMode, PredictorError};

#[derive(Debug, Parser)]
#[command(
    name = "duoserve",
    version,
    about = "Expert prefetch predictor and MoE offloading simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic trace file.
    GenTraces(GenArgs),
    /// Build popularity and affinity matrices from a trace file.
    Stats(StatsArgs),
    /// Train the next-layer expert predictor.
    Train(TrainArgs),
    /// Score a predictor on held-out traces.
    Eval(EvalArgs),
    /// Simulate one policy over every request of a trace file.
    Simulate(SimulateArgs),
    /// Simulate several policies and tabulate them.
    Compare(CompareArgs),
    /// gen-traces, split, stats, train, eval and compare in one run.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Random seed; falls back to $DUOSERVE_SEED, then 0.
    #[arg(long, env = "DUOSERVE_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub requests: usize,
    #[arg(long)]
    pub decode_len: usize,
    #[arg(long)]
    pub prefill_len: usize,
    #[arg(long)]
    pub alpha: f64,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub traces: PathBuf,
    /// Matrices JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-layer CSV heatmaps.
    #[arg(long)]
    pub csv_dir: Option<PathBuf>,
    /// Count decode tokens only.
    #[arg(long)]
    pub decode_only: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AffinityArg {
    Pooled,
    Concat,
}

impl From<AffinityArg> for AffinityMode {
    fn from(a: AffinityArg) -> Self {
        match a {
            AffinityArg::Pooled => AffinityMode::Pooled,
            AffinityArg::Concat => AffinityMode::Concat,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Use this width for every hidden layer instead of 2048..64.
    #[arg(long)]
    pub hidden_width: Option<usize>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    #[arg(long, value_enum, default_value_t = AffinityArg::Pooled)]
    pub affinity: AffinityArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    /// Model file.
    #[arg(long)]
    pub out: PathBuf,
    /// Training report JSON; defaults to `<out>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long, required_unless_present = "oracle")]
    pub model: Option<PathBuf>,
    /// Score the true selections instead of a model.
    #[arg(long)]
    pub oracle: bool,
    /// Also score the popularity-only baseline.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimInputs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub traces: PathBuf,
    /// Predictor model, required for the duoserve policy.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Statistics the model was trained with.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub inputs: SimInputs,
    /// ondemand, prefetchall, duoserve or oracle.
    #[arg(long)]
    pub policy: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Write the event timeline of one request as JSONL.
    #[arg(long)]
    pub timeline: Option<PathBuf>,
    /// Request whose timeline is written; defaults to the first.
    #[arg(long)]
    pub timeline_request: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub inputs: SimInputs,
    #[arg(long, value_delimiter = ',', default_value = "ondemand,prefetchall,duoserve,oracle")]
    pub policies: Vec<String>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub requests: usize,
    #[arg(long, default_value_t = 16)]
    pub decode_len: usize,
    #[arg(long, default_value_t = 8)]
    pub prefill_len: usize,
    #[arg(long, default_value_t = 0.8)]
    pub alpha: f64,
    /// Fraction of requests used for statistics and training.
    #[arg(long, default_value_t = 0.1)]
    pub train_fraction: f64,
    #[arg(long)]
    pub decode_only: bool,
    #[arg(long, value_delimiter = ',', default_value = "ondemand,prefetchall,duoserve,oracle")]
    pub policies: Vec<String>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub seed: SeedArg,
}

/// Bad arguments detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(PredictorError::NonFiniteLoss { .. }) = cause.downcast_ref::<PredictorError>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenTraces(a) => commands::gen_traces(&a).map(drop),
        Command::Stats(a) => commands::stats(&a).map(drop),
        Command::Train(a) => commands::train_cmd(&a).map(drop),
        Command::Eval(a) => commands::eval(&a).map(drop),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Compare(a) => commands::compare(&a).map(drop),
        Command::Pipeline(a) => commands::pipeline(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
