//! `deepssm`: simulate benchmark data, train, evaluate and grid-search deep
//! state-space models.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{classify, ErrorKind};

#[derive(Parser, Debug)]
#[command(name = "deepssm", version, about = "Deep state-space models for system identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train/validation/test CSV files for a synthetic benchmark.
    Simulate(Common),
    /// Train one model per seed and write checkpoints and run records.
    Train(Common),
    /// Evaluate trained checkpoints in open loop and write reports and plots.
    Evaluate(EvaluateArgs),
    /// Train and evaluate the cartesian product of the configured grid.
    Gridsearch(Common),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of concurrent jobs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
    /// Output directory; defaults to `$DEEPSSM_OUTPUT_ROOT/<config name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Evaluate this checkpoint instead of the runs in the output directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Test data CSV (`u0,..,y0,..`) instead of the configured test sets.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Skip SVG plots.
    #[arg(long)]
    pub no_plot: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(c) => commands::simulate(c),
        Command::Train(c) => commands::train(c),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Gridsearch(c) => commands::gridsearch(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(match classify(&err) {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
                ErrorKind::Other => 1,
            })
        }
    }
}
