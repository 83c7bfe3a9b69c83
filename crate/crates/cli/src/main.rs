//! `liqss` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use liqss::bench::PeakAlloc;
use liqss::{ErrorKind, LiqssError};

#[global_allocator]
static ALLOC: PeakAlloc = PeakAlloc::new();

#[derive(Parser)]
#[command(name = "liqss", version, about = "Tensor-train state-space KPI forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic KPI series as CSV.
    GenData(GenDataArgs),
    /// Fit a model; writes model.ckpt, history.csv and config.txt.
    Train(Common),
    /// Score a checkpoint on the test split; writes metrics.csv and metrics.txt.
    Evaluate(EvalArgs),
    /// One-step forecasts for every window of a series, including the step after its end.
    Predict(PredictArgs),
    /// Parameter breakdown, or one total per swept value.
    ParamCount(ParamCountArgs),
    /// Per-example timing and peak heap over several lookbacks.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of time steps.
    #[arg(long, default_value_t = 5000)]
    t: usize,
    /// Number of KPIs.
    #[arg(long, default_value_t = 13)]
    k: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

/// Flags shared by the model commands. Precedence: named flags, then
/// `--set` pairs, then the config file, then built-in defaults.
#[derive(Args, Clone, Default)]
pub struct Common {
    /// key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV data file (default: synthetic series).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Length of the synthetic series.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Target KPI column name.
    #[arg(long)]
    pub target: Option<String>,
    /// Maximum training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Any config key, e.g. `--set lookback=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint file (default: <out>/model.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also write predictions.csv.
    #[arg(long)]
    predictions: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct ParamCountArgs {
    #[command(flatten)]
    common: Common,
    /// TT ranks to sweep (input and head together).
    #[arg(long, value_delimiter = ',')]
    tt_rank: Vec<usize>,
    /// Mixture component counts to sweep.
    #[arg(long, value_delimiter = ',')]
    cm: Vec<usize>,
    /// State dimensions to sweep.
    #[arg(long, value_delimiter = ',')]
    ns: Vec<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
    lookbacks: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    warmup: usize,
    #[arg(long, default_value_t = 100)]
    reps: usize,
}

fn exit_code(e: &LiqssError) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Runtime => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let detail = e
                .to_string()
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("UsageError: {detail}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a.t, a.k, a.seed, &a.out),
        Command::Train(c) => commands::train(&c),
        Command::Evaluate(a) => commands::evaluate(&a.common, a.checkpoint.as_deref(), a.predictions),
        Command::Predict(a) => commands::predict(&a.common, a.checkpoint.as_deref()),
        Command::ParamCount(a) => commands::param_count(&a.common, &a.tt_rank, &a.cm, &a.ns),
        Command::Bench(a) => commands::bench(&a.common, a.lookbacks, a.batch, a.warmup, a.reps, &ALLOC),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let text = e.to_string().replace('\n', " ");
            eprintln!("{}: {}", e.code(), text);
            ExitCode::from(exit_code(&e))
        }
    }
}
