//! `cosood`: train cosine-softmax OOD detectors, evaluate them against OOD
//! sets, run the ablation matrix, and sweep fixed scales.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cosood",
    version,
    about = "Hyperparameter-free OOD detection via softmax of scaled cosine similarity"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Training seed; repeat for several runs. Overrides the config's seeds.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output directory. Overrides the config's out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent jobs (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one checkpoint per seed.
    Train(CommonArgs),
    /// Evaluate checkpoints against the configured OOD sets.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Score the ensemble of all given checkpoints (averaged class
        /// scores) instead of only per-checkpoint reports.
        #[arg(long)]
        ensemble: bool,
        /// Checkpoint files to evaluate.
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Train and evaluate the ten-row ablation matrix.
    Ablate(CommonArgs),
    /// AUROC versus fixed scale, plus the predicted-scale reference.
    ScaleSweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Scales to sweep (default: 16,32,64,128).
        #[arg(long, value_delimiter = ',')]
        scales: Vec<f64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => commands::cmd_train(&c.config, &c.seeds, c.out.as_deref(), c.threads),
        Command::Eval {
            common,
            ensemble,
            checkpoints,
        } => commands::cmd_eval(
            &common.config,
            checkpoints,
            common.out.as_deref(),
            *ensemble,
            common.threads,
        ),
        Command::Ablate(c) => commands::cmd_ablate(&c.config, &c.seeds, c.out.as_deref(), c.threads),
        Command::ScaleSweep { common, scales } => commands::cmd_scale_sweep(
            &common.config,
            scales,
            &common.seeds,
            common.out.as_deref(),
            common.threads,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
