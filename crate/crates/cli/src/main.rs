//! `cddm`: generate datasets, train denoisers, evaluate and sweep.

mod commands;
mod run_meta;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cddm_core::diffusion::StartStep;

#[derive(Parser, Debug)]
#[command(name = "cddm", version, about = "Channel estimation benchmarks for cell-free ISAC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset into `--out`.
    Generate(Common),
    /// Train CDDM and TDDM; writes checkpoints and loss logs into `--out`.
    Train(Common),
    /// NMSE of every method on a dataset's test split.
    Eval(EvalArgs),
    /// NMSE against SNR, U or d on fresh scenarios.
    Sweep(EvalArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Key-value config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Model checkpoint; repeat for CDDM and TDDM. Overrides config paths.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    /// Evaluate LS and MMSE only.
    #[arg(long)]
    pub baseline_only: bool,
    /// Reverse-chain start: `full`, `matched`, or a step number.
    #[arg(long)]
    pub start_step: Option<StartStep>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(c) => commands::generate(c),
        Command::Train(c) => commands::train(c),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
