//! Command-line front end for the leave-one-label-out OOD detection pipeline.
//!
//! Four subcommands cover the full workflow: `build-split` cuts a corpus into
//! the five benchmark sets, `train` fits a predictor, `eval` tunes and scores
//! detectors, and `report` merges evaluation reports into one comparison
//! table. Global flags (`--config`, `--seed`, `--out`, `--jobs`) can also be
//! set through `KFOLDEN_`-prefixed environment variables; explicit flags win.
//!
//! Every run is a pure function of config file and seed: all randomness
//! derives from the root seed by named streams, outputs are written
//! atomically, and no output file contains a timestamp, so reruns reproduce
//! identical bytes. Log chatter (with timestamps) goes to stderr only.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kfolden::detect::{Method, TuningSet};

use config::{ExperimentConfig, ModelKind};

#[derive(Parser)]
#[command(name = "kfolden", version, about = "Out-of-distribution detection for text classification")]
struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true, env = "KFOLDEN_CONFIG", value_name = "FILE")]
    config: Option<PathBuf>,

    /// Root random seed; overrides the config file.
    #[arg(long, global = true, env = "KFOLDEN_SEED")]
    seed: Option<u64>,

    /// Output directory; overrides the config file.
    #[arg(long, global = true, env = "KFOLDEN_OUT", value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads for data-parallel sections (default: all cores).
    #[arg(long, global = true, env = "KFOLDEN_JOBS", value_name = "N")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut a corpus into train/id_valid/ood_valid/id_test/ood_test.
    BuildSplit,
    /// Train a classifier or ensemble on the split's training set.
    Train(TrainArgs),
    /// Tune detectors on the validation pools and score the test sets.
    Eval(EvalArgs),
    /// Merge evaluation reports into one comparison table.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Predictor to train; overrides the config file.
    #[arg(long, value_enum)]
    method: Option<ModelKind>,
    /// Uniformity-penalty weight in [0,1] (kfolden only).
    #[arg(long)]
    gamma: Option<f64>,
    /// Split directory; defaults to `<out>/split`.
    #[arg(long, value_name = "DIR")]
    split: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Detector to run (repeatable); overrides the config file.
    #[arg(long = "method", value_name = "METHOD")]
    methods: Vec<Method>,
    /// Validation pool for threshold tuning: id_valid or ood_valid.
    #[arg(long, value_name = "SET")]
    tuning_set: Option<TuningSet>,
    /// Checkpoint directory; defaults to `<out>/model`.
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
    /// Split directory; defaults to `<out>/split`.
    #[arg(long, value_name = "DIR")]
    split: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json files or directories to search for them.
    #[arg(value_name = "PATH", required = true)]
    paths: Vec<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        configure_jobs(jobs)?;
    }

    // `report` needs no experiment config; the pipeline stages do.
    if let Command::Report(args) = &cli.command {
        let out = match (&cli.out, &cli.config) {
            (Some(out), _) => Some(out.clone()),
            (None, Some(path)) => ExperimentConfig::load(path)?.out,
            (None, None) => None,
        };
        return commands::cmd_report(out.as_deref(), &args.paths);
    }

    let config_path = cli
        .config
        .as_ref()
        .context("this command needs --config (or KFOLDEN_CONFIG)")?;
    let config = ExperimentConfig::load(config_path)?;
    let seed = cli.seed.unwrap_or(config.seed);
    let out = cli
        .out
        .clone()
        .or_else(|| config.out.clone())
        .context("no output directory: set --out, KFOLDEN_OUT, or `out` in the config")?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    match cli.command {
        Command::BuildSplit => commands::cmd_build_split(&config, seed, &out),
        Command::Train(args) => commands::cmd_train(
            &config,
            seed,
            &out,
            args.method,
            args.gamma,
            args.split,
        ),
        Command::Eval(args) => commands::cmd_eval(
            &config,
            seed,
            &out,
            args.methods,
            args.tuning_set,
            args.checkpoint,
            args.split,
        ),
        Command::Report(_) => unreachable!("handled above"),
    }
}

/// Pin the data-parallel worker pool to `jobs` threads.
#[cfg(feature = "parallel")]
fn configure_jobs(jobs: usize) -> Result<()> {
    if jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .context("configuring the worker pool")
}

/// Sequential build: there is no pool, so only validate the value.
#[cfg(not(feature = "parallel"))]
fn configure_jobs(jobs: usize) -> Result<()> {
    if jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    log::warn!("built without the parallel feature; --jobs has no effect");
    Ok(())
}
