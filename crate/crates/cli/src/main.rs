//! `apsel`: scenario generation, dataset building, training, evaluation
//! and prediction for GNN-based access point selection.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric
//! failure.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{BuildDatasetArgs, EvalArgs, GenScenarioArgs, PredictArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "apsel", version, about = "GNN-based access point selection pipeline")]
struct Cli {
    /// Worker threads for data generation and evaluation (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate an AP deployment with shadowing maps.
    GenScenario(GenScenarioArgs),
    /// Write labeled graphs for a scenario.
    BuildDataset(BuildDatasetArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or only the proximity baselines).
    Eval(EvalArgs),
    /// Score AP links for given UE positions.
    Predict(PredictArgs),
}

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("APSEL_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: --jobs: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let result = match cli.command {
        Command::GenScenario(a) => commands::gen_scenario(&a),
        Command::BuildDataset(a) => commands::build_dataset(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e.chain().any(|c| {
                c.downcast_ref::<apsel_core::Error>()
                    .is_some_and(apsel_core::Error::is_numeric)
            });
            ExitCode::from(if numeric { EXIT_NUMERIC } else { EXIT_USAGE })
        }
    }
}
