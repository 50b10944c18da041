mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sdstm_core::error::ErrorKind;

#[derive(Parser)]
#[command(name = "sdstm", version, about = "Scale-disentangled spatiotemporal forecasting on road networks")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset (series.csv + graph.json).
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint, history and test metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint with per-node and per-hour errors.
    Eval(EvalArgs),
    /// Forecast the horizon that follows a look-back window.
    Predict(PredictArgs),
    /// Dump the stable/dynamic split and its degree of variation.
    Decompose(DecomposeArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub nodes: usize,
    #[arg(long, default_value_t = 31)]
    pub days: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub step_minutes: u32,
    /// Measurement noise relative to each node's scale.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Args, Clone)]
pub struct DataArgs {
    /// Directory with series.csv and graph.json.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Explicit series CSV (overrides --data).
    #[arg(long)]
    pub series: Option<PathBuf>,
    /// Explicit graph JSON (overrides --data).
    #[arg(long)]
    pub graph: Option<PathBuf>,
}

/// Settings shared by every command that builds a model. Flags override
/// the values of `--config`.
#[derive(Args, Clone, Default)]
pub struct ModelArgs {
    /// Flat JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub lookback: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long = "segment-len")]
    pub segment_len: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub ridge: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Put the validation block before the test block.
    #[arg(long)]
    pub val_before_test: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Random training windows drawn per epoch instead of all of them.
    #[arg(long)]
    pub windows_per_epoch: Option<usize>,
    /// Evenly spaced validation windows scored per epoch.
    #[arg(long)]
    pub val_windows: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Clock-hour range `START-END` (half-open), e.g. `8-9` for 08:00–08:59.
    #[arg(long)]
    pub hours: Option<String>,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Step index one past the last look-back row; defaults to the series end.
    #[arg(long)]
    pub end: Option<usize>,
}

#[derive(Args)]
pub struct DecomposeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Use the gate of a trained checkpoint instead of a fresh one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated node ids to score; default samples `--sample` nodes.
    #[arg(long, value_delimiter = ',')]
    pub node_ids: Vec<String>,
    #[arg(long, default_value_t = 4)]
    pub sample: usize,
    /// Subset length in steps; defaults to one day.
    #[arg(long)]
    pub period: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub subsets: usize,
    #[arg(long, default_value_t = 0)]
    pub start: usize,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<sdstm_core::Error>()) {
        Some(e) => match e.kind() {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        },
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Decompose(a) => commands::decompose(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Core errors already embed their causes; add only new context.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
