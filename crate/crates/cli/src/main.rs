//! `ortho-mtl`: single entry point for the parameter-efficient
//! multi-task learning stack — dataset generation, training, ablation
//! sweeps, evaluation, activation heatmaps, and report assembly.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(
    name = "ortho-mtl",
    version,
    about = "Parameter-efficient multi-task learning with orthogonal subspace decoupling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic correlated multi-task benchmark
    GenData(commands::GenDataArgs),
    /// Train one configuration and write its run artifacts
    Train(commands::TrainArgs),
    /// Run the PEFT x lambda x seed ablation matrix
    Sweep(commands::SweepArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(commands::EvalArgs),
    /// Export adapter activation heatmaps for one image
    Viz(commands::VizArgs),
    /// Assemble report artifacts from saved sweep results
    Report(commands::ReportArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help / --version surface as parse "errors" but are not
            // usage mistakes; everything else exits 1.
            let usage_error =
                !matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            std::process::exit(if usage_error { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data(&args),
        Command::Train(args) => commands::train(&args),
        Command::Sweep(args) => commands::sweep(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Viz(args) => commands::viz(&args),
        Command::Report(args) => commands::report(&args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}
