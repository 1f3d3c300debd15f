//! Experiment driver for the merged-token online-adaptation pipeline.
//!
//! One JSON run configuration feeds every subcommand; `--seed` and `--out`
//! override the master seed and output directory without editing the file.
//! `ETTA_THREADS` caps worker parallelism for the whole process.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "etta", version, about = "token-merging ViT with online test-time adaptation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic train/test datasets
    GenData(CommonArgs),
    /// Train the source model on the clean training set
    Pretrain(CommonArgs),
    /// Capture source feature statistics from clean training images
    Stats(CommonArgs),
    /// Stream corrupted test batches through online adaptation
    Adapt(CommonArgs),
    /// Print and save the analytic compute accounting
    Flops(CommonArgs),
    /// Aggregate adapt runs into a table and scatter plot
    Report(ReportArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override (also reseeds the adaptation stream)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Adaptation run directories, each holding a summary.csv
    #[arg(required = true)]
    run_dirs: Vec<PathBuf>,
    /// Directory for table.txt, rows.csv, scatter.csv, scatter.svg
    #[arg(long, default_value = "runs/report")]
    out: PathBuf,
}

fn init_thread_pool() -> etta::Result<()> {
    if let Ok(raw) = std::env::var("ETTA_THREADS") {
        let n: usize = raw
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| etta::Error::Config(format!("ETTA_THREADS must be a positive integer, got {raw:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| etta::Error::State(format!("thread pool init failed: {e}")))?;
    }
    Ok(())
}

fn load(common: &CommonArgs) -> etta::Result<RunConfig> {
    RunConfig::load(common.config.as_deref(), common.seed, common.out.as_deref())
}

fn run() -> etta::Result<()> {
    init_thread_pool()?;
    match Cli::parse().cmd {
        Cmd::GenData(a) => commands::gen_data::run(&load(&a)?),
        Cmd::Pretrain(a) => commands::pretrain::run(&load(&a)?),
        Cmd::Stats(a) => commands::stats::run(&load(&a)?),
        Cmd::Adapt(a) => commands::adapt::run(&load(&a)?),
        Cmd::Flops(a) => commands::flops::run(&load(&a)?),
        Cmd::Report(a) => commands::report::run(&a.run_dirs, &a.out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
