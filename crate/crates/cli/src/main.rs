//! `relcirc`: dataset generation, evaluation, attention synopses, variance
//! partitioning and intervention plans from the command line.
//!
//! Exit codes: 0 on success, 1 on data errors (message tagged with the
//! failing module), 2 on usage errors.

mod commands;
mod error;
mod files;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use crate::commands::{dataset, encode, evaluate, factors, plan, report, synopsis};

#[derive(Parser)]
#[command(name = "relcirc", version, about = "Spatial-relation circuit analysis toolkit")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores)
    #[arg(long, global = true, env = "RELCIRC_WORKERS")]
    workers: Option<usize>,

    /// Log filter, e.g. `info` or `relcirc=debug` (RUST_LOG takes precedence)
    #[arg(long, global = true, default_value = "info")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic two-object dataset with labels
    GenDataset(dataset::GenDatasetArgs),
    /// Score rendered or generated images against their labels
    Evaluate(evaluate::EvaluateArgs),
    /// Encode captions with a random-embedding text encoder
    Encode(encode::EncodeArgs),
    /// Reduce one attention dump to layer × head synopses
    Synopsis(synopsis::SynopsisArgs),
    /// Run the synopsis over every prompt in a directory
    Sweep(synopsis::SweepArgs),
    /// Variance partitioning of representations over label factors
    Varpart(factors::VarpartArgs),
    /// Estimate per-level effect vectors (and optional PCA)
    Effects(factors::EffectsArgs),
    /// Swap one factor level for another in a prompt embedding
    EditEmbedding(factors::EditArgs),
    /// Build, validate and canonicalize intervention plans
    Plan(plan::PlanArgs),
    /// Render result files into summary tables
    Report(report::ReportArgs),
}

fn init_logging(filter: &str) {
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(filter));
    let _ = tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_current_span(false)
        .try_init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli.log);
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error[cli]: --workers must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            tracing::warn!(error = %e, "worker pool already initialised");
        }
    }
    let result = match cli.command {
        Command::GenDataset(a) => dataset::run(a),
        Command::Evaluate(a) => evaluate::run(a),
        Command::Encode(a) => encode::run(a),
        Command::Synopsis(a) => synopsis::run(a),
        Command::Sweep(a) => synopsis::run_sweep(a),
        Command::Varpart(a) => factors::run_varpart(a),
        Command::Effects(a) => factors::run_effects(a),
        Command::EditEmbedding(a) => factors::run_edit(a),
        Command::Plan(a) => plan::run(a),
        Command::Report(a) => report::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.module());
            ExitCode::from(1)
        }
    }
}
