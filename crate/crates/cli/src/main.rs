//! `matdiff` command-line front end: catalog and dataset generation, training,
//! guided sampling, backprojection and evaluation as reproducible file pipelines.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use matdiff::error::ErrorClass;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] matdiff::Error),
    #[error("{0}")]
    Usage(String),
    /// The command ran but one of its checks or items failed.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Failed(_) => 3,
            CliError::Core(e) => match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Validation => 2,
                ErrorClass::Numerical => 3,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "matdiff", version, about = "Inverse composite design with FEM-guided diffusion")]
struct Cli {
    /// Worker threads for the parallel stages (default: all cores).
    #[arg(long, global = true, env = "MATDIFF_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic material catalog.
    GenCatalog(commands::GenCatalogArgs),
    /// Generate a dataset of rasterized microstructures.
    GenDataset(commands::GenDatasetArgs),
    /// Train the denoiser on a dataset.
    Train(commands::TrainArgs),
    /// Draw guided or unguided samples from a trained denoiser.
    Sample(commands::SampleArgs),
    /// Map samples back to discrete designs.
    Backproject(commands::BackprojectArgs),
    /// Backproject samples and evaluate them against a target modulus.
    Evaluate(commands::EvaluateArgs),
    /// Select target bulk moduli from a dataset.
    Targets(commands::TargetsArgs),
    /// Compare adjoint and finite-difference gradients.
    Gradcheck(commands::GradcheckArgs),
    /// Check fresh samples against the Voigt-Reuss bounds.
    BoundsCheck(commands::BoundsCheckArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure {n} workers: {e}")))?;
    }
    match cli.command {
        Command::GenCatalog(a) => commands::gen_catalog(a),
        Command::GenDataset(a) => commands::gen_dataset(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Backproject(a) => commands::backproject(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Targets(a) => commands::targets(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::BoundsCheck(a) => commands::bounds_check(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
