//! `infkan`: generate datasets, train, evaluate, sweep and probe
//! InfinityKAN models.
//!
//! Exit codes: 0 success, 2 usage error, 3 training divergence, 4 I/O error.

mod error;
mod evaluate;
mod generate;
mod overrides;
mod probe;
mod sweep;
mod train;

use clap::{Parser, Subcommand};

use crate::error::{CliError, EXIT_USAGE};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(
    name = "infkan",
    version,
    about = "Kolmogorov-Arnold networks with a learned number of basis functions",
    after_help = "Configuration keys can be overridden on train and sweep as `--section.key value`, \
                  e.g. `--optim.lr 0.005 --model.basis relu`. INFKAN_SEED overrides `seed` \
                  from the file; explicit flags win over both."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV plus a metadata sidecar.
    Generate(generate::GenerateArgs),
    /// Train one model into a run directory.
    Train(train::TrainArgs),
    /// Report train, validation and test metrics of a checkpoint.
    Evaluate(evaluate::EvaluateArgs),
    /// Train the cross product of a grid and summarize per cell.
    Sweep(sweep::SweepArgs),
    /// Run a diagnostic probe and print CSV.
    Probe(probe::ProbeArgs),
}

fn run(args: Vec<String>) -> Result<(), CliError> {
    let (args, overrides) = overrides::extract(args)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match &cli.command {
        Command::Generate(a) => generate::run(a),
        Command::Train(a) => train::run(a, &overrides),
        Command::Evaluate(a) => evaluate::run(a),
        Command::Sweep(a) => sweep::run(a, &overrides),
        Command::Probe(a) => probe::run(a),
    }
}

fn main() {
    if let Err(e) = run(std::env::args().collect()) {
        eprintln!("infkan: {e}");
        std::process::exit(e.exit_code());
    }
}
