//! `flowplan` — command-line toolkit for the one-step trajectory planner:
//! dataset generation, noise-prior fitting, training, sampling, evaluation,
//! and benchmarking.
//!
//! Every command is deterministic given its resolved configuration (timing
//! fields in `bench` output excepted), writes its outputs atomically, and
//! records the configuration it actually ran with next to those outputs.
//! Failures exit non-zero with a single-line diagnostic on stderr.

mod commands;
mod samples;
mod util;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "flowplan",
    version,
    about = "One-step trajectory planning toolkit",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic driving dataset (JSON-lines)
    GenData(commands::gen_data::Args),
    /// Fit the Gaussian-mixture noise prior from a dataset's experts
    FitGmn(commands::fit_gmn::Args),
    /// Train a planner: one-step model by default, ODE baseline with --baseline-fm
    Train(commands::train::Args),
    /// Draw proposals (and a fused plan) from a trained checkpoint
    Sample(commands::sample::Args),
    /// Score a samples file (or the experts themselves) against a dataset
    Eval(commands::eval::Args),
    /// Compare one-step sampling against multi-step ODE solving
    Bench(commands::bench::Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(args) => commands::gen_data::run(args),
        Command::FitGmn(args) => commands::fit_gmn::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Sample(args) => commands::sample::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Bench(args) => commands::bench::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // `{err:#}` joins the anyhow context chain into one line.
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
