use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kspace_core::pipeline::{ChannelSet, PipelineKind};

mod commands;
mod config;
mod error;
mod output;

use config::{Config, Overrides};
use error::CliError;

#[derive(Parser)]
#[command(name = "kspace", version, about = "Phantom MRI k-space experiments: generate, preprocess, train, evaluate, benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Dataset directory holding manifest.json; defaults to --out.
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Comma-separated acceleration factors, e.g. 1,2,4,16.
    #[arg(long, global = true, value_delimiter = ',')]
    r_grid: Option<Vec<usize>>,

    /// mag, mag+phase or mag+k.
    #[arg(long, global = true, value_parser = parse_channels)]
    channels: Option<ChannelSet>,

    /// pca or grappa.
    #[arg(long, global = true, value_parser = parse_pipeline)]
    pipeline: Option<PipelineKind>,

    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labeled phantom dataset: manifest.json plus one .ksp file per sample.
    Generate,
    /// Run the configured pipeline on every sample at each factor of the grid.
    Run,
    /// Train a classifier on the train split and save a checkpoint.
    Train,
    /// Score the test split at each factor and write metrics with bootstrap intervals.
    Eval {
        /// Defaults to the checkpoint `train` writes for the configured pipeline and channels.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use the labels as scores instead of a model.
        #[arg(long)]
        scores_from_labels: bool,
    },
    /// Time both pipelines stage by stage on phantom slices.
    Bench,
    /// Dump images, log-scaled k-space and metric curves.
    Plot {
        /// Sample id; defaults to the first manifest entry.
        #[arg(long)]
        sample: Option<u64>,
    },
}

fn parse_channels(s: &str) -> Result<ChannelSet, String> {
    ChannelSet::parse(s).ok_or_else(|| format!("unknown channel set '{s}' (mag, mag+phase, mag+k)"))
}

fn parse_pipeline(s: &str) -> Result<PipelineKind, String> {
    PipelineKind::parse(s).ok_or_else(|| format!("unknown pipeline '{s}' (pca, grappa)"))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        r_grid: cli.r_grid,
        channels: cli.channels,
        pipeline: cli.pipeline,
        threads: cli.threads,
    };
    let cfg = Config::load(cli.config.as_deref(), &overrides)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let out = cli.out.as_path();
    let data = cli.data.as_deref().unwrap_or(out);
    match cli.command {
        Command::Generate => commands::generate(&cfg, out),
        Command::Run => commands::run(&cfg, data, out),
        Command::Train => commands::train_cmd(&cfg, data, out),
        Command::Eval {
            checkpoint,
            scores_from_labels,
        } => commands::eval(&cfg, data, out, checkpoint.as_deref(), scores_from_labels),
        Command::Bench => commands::bench(&cfg, out),
        Command::Plot { sample } => commands::plot(&cfg, data, out, sample),
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
