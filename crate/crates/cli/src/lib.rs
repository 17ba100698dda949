//! The `edgeloc` command line: corpus generation, training, evaluation,
//! serving and device-side localization.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use failure::Result;

#[derive(Parser)]
#[command(name = "edgeloc", version, about = "CapsNet WiFi fingerprint localization")]
struct Cli {
    /// JSON file of flag values; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fingerprint corpus.
    Gen(GenArgs),
    /// Convert UJIIndoorLoc CSV files into corpora.
    IngestUji(IngestUjiArgs),
    /// Train a CapsNet and write a model bundle.
    Train(TrainArgs),
    /// Evaluate a model bundle (and a kNN baseline) on the test split.
    Eval(EvalArgs),
    /// Train and evaluate every point of a hyperparameter grid.
    GridSearch(GridSearchArgs),
    /// Serve a model bundle over HTTP.
    Serve(ServeArgs),
    /// Upload a model bundle to a running server.
    Publish(PublishArgs),
    /// Localize one sample on the device side.
    Locate(LocateArgs),
    /// Measure per-sample positioning time at several batch sizes.
    BenchLatency(BenchArgs),
}

#[derive(Args, Serialize)]
pub struct GenArgs {
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub samples_per_rp: Option<usize>,
    #[arg(long)]
    pub shadowing_db: Option<f64>,
    /// Output directory or file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct IngestUjiArgs {
    /// UJIIndoorLoc training CSV.
    #[arg(long)]
    pub train: PathBuf,
    /// UJIIndoorLoc validation CSV, written as the test corpus.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub building: i32,
    /// Keep the N most frequently detected APs of the training file.
    #[arg(long)]
    pub top_aps: Option<usize>,
    #[arg(long, default_value_t = 1.6)]
    pub cell_size: f64,
    /// Output directory; receives `train/` and `test/` corpora.
    #[arg(long)]
    pub out: PathBuf,
}

/// Where the training and test samples come from: `data` is split unless
/// a separate `test_data` corpus is given.
pub struct DataArgs {
    pub data: PathBuf,
    pub test_data: Option<PathBuf>,
    pub train_fraction: f64,
    pub seed: u64,
}

#[derive(Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub filters: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub routing_iterations: usize,
    #[arg(long, default_value_t = 8)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 1)]
    pub model_version: u64,
    /// Model bundle to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the training log here.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub model: PathBuf,
    /// Neighbours for the kNN baseline; 0 skips it.
    #[arg(long, default_value_t = 3)]
    pub knn: usize,
    #[arg(long, default_value_t = 50)]
    pub batch_size: usize,
    /// Timed passes over the test set; 0 skips timing.
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
    /// Report file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Error CDF as CSV.
    #[arg(long)]
    pub cdf: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct GridSearchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// `default` or a JSON file with `filters`, `channels` and `dims` lists.
    #[arg(long, default_value = "default")]
    pub space: String,
    #[arg(long, default_value_t = 8)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 50)]
    pub eval_batch_size: usize,
    #[arg(long, default_value_t = 3)]
    pub repetitions: usize,
    /// JSON results; the ranked table always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
}

#[derive(Args, Serialize)]
pub struct PublishArgs {
    #[arg(long)]
    pub server: String,
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Args, Serialize)]
pub struct LocateArgs {
    /// Edge server to sync from.
    #[arg(long, conflicts_with = "model")]
    pub server: Option<String>,
    /// Local bundle, used instead of a server.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// JSON sample: `{"readings": {"AP1": -61.0, ...}}`.
    #[arg(long)]
    pub sample: PathBuf,
    /// Bundle cache; defaults to $EDGELOC_CACHE_DIR, then `.edgeloc-cache`.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "20,30,40,50")]
    pub batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

macro_rules! data_args {
    ($($ty:ty),*) => {$(
        impl $ty {
            fn data(&self) -> DataArgs {
                DataArgs {
                    data: self.data.clone(),
                    test_data: self.test_data.clone(),
                    train_fraction: self.train_fraction,
                    seed: self.seed,
                }
            }
        }
    )*};
}

data_args!(TrainArgs, EvalArgs, GridSearchArgs, BenchArgs);

fn run(args: Vec<std::ffi::OsString>) -> Result<()> {
    let argv = config::expand_config(args)?;
    let cli = Cli::parse_from(argv);
    match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::IngestUji(a) => commands::ingest_uji(a),
        Command::Train(a) => {
            let data = a.data();
            commands::train(a, data)
        }
        Command::Eval(a) => {
            let data = a.data();
            commands::eval(a, data)
        }
        Command::GridSearch(a) => {
            let data = a.data();
            commands::grid_search(a, data)
        }
        Command::Serve(a) => commands::serve(a),
        Command::Publish(a) => commands::publish(a),
        Command::Locate(a) => commands::locate(a),
        Command::BenchLatency(a) => {
            let data = a.data();
            commands::bench_latency(a, data)
        }
    }
}

/// Runs the command line with `args` (program name first) and returns the
/// process exit code. Failures print one JSON line on stderr.
pub fn main_with_args(args: Vec<std::ffi::OsString>) -> ExitCode {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.to_json_line());
            ExitCode::FAILURE
        }
    }
}
