//! `fewloop`: simulations, stopping-predictor training, data ingestion and
//! the REST server.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on bad usage
//! (unknown flags, a malformed plan or config).

mod error;
mod ingest;
mod plan;
mod predictor;
mod serve;
mod simulate;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fewloop_core::corpus::Format;
use fewloop_core::perfpred::{ForestConfig, DEFAULT_HISTORY};
use tracing_subscriber::filter::LevelFilter;

use crate::plan::Overrides;

#[derive(Debug, Parser)]
#[command(name = "fewloop", version, about = "Active few-shot annotation loop")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a simulation plan with a simulated annotator.
    Simulate(SimulateCmd),
    /// Evaluate the stopping predictor leave-one-dataset-out and train the final forest.
    TrainPredictor(TrainPredictorCmd),
    /// Serve the REST API.
    Serve(ServeCmd),
    /// Read a pool, print label statistics and optionally write a derived copy.
    Ingest(IngestCmd),
}

#[derive(Debug, Args)]
struct SimulateCmd {
    /// Plan file (JSON).
    plan: PathBuf,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
    /// Trials run in parallel; outputs do not depend on it.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
    /// Seed base for every experiment (trial t uses seed + t).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    batch_k: Option<usize>,
    #[arg(long)]
    pool_cap: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainPredictorCmd {
    /// Curve corpus files (record lines, as written by `simulate`).
    #[arg(required = true)]
    corpus: Vec<PathBuf>,
    /// Where to write the forest trained on the whole corpus.
    #[arg(short, long)]
    out: PathBuf,
    /// Leave-one-out report as CSV.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Full leave-one-out report as JSON.
    #[arg(long)]
    report_json: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    tau: f64,
    #[arg(long, default_value_t = DEFAULT_HISTORY)]
    history: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fixed-step baselines, as instance counts.
    #[arg(long, value_delimiter = ',', default_values_t = [272, 288, 304])]
    baselines: Vec<usize>,
    #[arg(long, default_value_t = ForestConfig::default().n_trees)]
    trees: usize,
    /// Maximum tree depth; 0 means unlimited.
    #[arg(long, default_value_t = 8)]
    max_depth: usize,
    #[arg(long, default_value_t = ForestConfig::default().min_leaf)]
    min_leaf: usize,
}

#[derive(Debug, Args)]
struct ServeCmd {
    #[arg(long, env = "FEWLOOP_ADDR", default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Service config file (JSON); flags override its values.
    #[arg(long, env = "FEWLOOP_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "FEWLOOP_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Stopping-predictor forest written by `train-predictor`.
    #[arg(long, env = "FEWLOOP_FOREST")]
    forest: Option<PathBuf>,
    #[arg(long, env = "FEWLOOP_TAU")]
    tau: Option<f64>,
    #[arg(long, env = "FEWLOOP_HISTORY")]
    history: Option<usize>,
    #[arg(long, env = "FEWLOOP_ENCODER_DIM")]
    encoder_dim: Option<usize>,
    #[arg(long, env = "FEWLOOP_MAX_RUN_BATCH")]
    max_run_batch: Option<usize>,
    /// Retrain in the background and answer updates with 202.
    #[arg(long, env = "FEWLOOP_ASYNC_TRAINING")]
    async_training: bool,
}

#[derive(Debug, Args)]
struct IngestCmd {
    /// Pool file (.csv with an id,text[,label] header, or .jsonl).
    input: PathBuf,
    #[arg(long, value_parser = parse_format)]
    format: Option<Format>,
    /// Label-set lines; defaults to the gold labels in the pool.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Down-sample to an exponentially skewed label distribution with this decay base.
    #[arg(long)]
    unbalance: Option<f64>,
    #[arg(long)]
    pool_cap: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the resulting pool as record lines.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

fn parse_format(s: &str) -> Result<Format, String> {
    s.parse().map_err(|e: fewloop_core::Error| e.to_string())
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => LevelFilter::WARN,
        1 => LevelFilter::INFO,
        _ => LevelFilter::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Simulate(c) => simulate::run(simulate::SimulateArgs {
            plan: &c.plan,
            out: &c.out,
            jobs: c.jobs as usize,
            overrides: Overrides {
                seed: c.seed,
                budget: c.budget,
                batch_k: c.batch_k,
                pool_cap: c.pool_cap,
                trials: c.trials,
            },
        }),
        Command::TrainPredictor(c) => predictor::run(predictor::PredictorArgs {
            corpus: c.corpus,
            model_out: c.out,
            report: c.report,
            report_json: c.report_json,
            tau: c.tau,
            history: c.history,
            seed: c.seed,
            baselines: c.baselines,
            forest: ForestConfig {
                n_trees: c.trees,
                max_depth: (c.max_depth > 0).then_some(c.max_depth),
                min_leaf: c.min_leaf,
                ..ForestConfig::default()
            },
        }),
        Command::Serve(c) => serve::run(serve::ServeArgs {
            addr: c.addr,
            config: c.config,
            data_dir: c.data_dir,
            forest: c.forest,
            tau: c.tau,
            history: c.history,
            encoder_dim: c.encoder_dim,
            max_run_batch: c.max_run_batch,
            async_training: c.async_training,
        }),
        Command::Ingest(c) => ingest::run(ingest::IngestArgs {
            input: c.input,
            format: c.format,
            labels: c.labels,
            unbalance: c.unbalance,
            pool_cap: c.pool_cap,
            seed: c.seed,
            out: c.out,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // Usage errors exit with 2; --help and --version with 0.
        Err(e) => e.exit(),
    };
    init_logging(cli.verbose);
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            error::exit_code(&e)
        }
    }
}
