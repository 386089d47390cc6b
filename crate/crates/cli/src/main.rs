mod commands;
mod config;
mod error;
mod formats;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::*;
use error::{CliError, CliResult};

/// Sparse-view CT simulation and reconstruction.
#[derive(Debug, Parser)]
#[command(name = "stride", version)]
struct Cli {
    /// Worker threads for the parallel kernels; defaults to one per core.
    #[arg(long, global = true, env = "STRIDE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes a Shepp-Logan phantom.
    Phantom(PhantomArgs),
    /// Projects an image into a (sparse, noisy) sinogram.
    Simulate(SimulateArgs),
    /// Fits a prior bundle on a phantom corpus, optionally training networks.
    Train(TrainArgs),
    /// Reconstructs an image from a sinogram.
    Reconstruct(ReconstructArgs),
    /// Compares two images.
    Eval(EvalArgs),
    /// Runs component toggles or a guidance-weight sweep.
    Ablate(AblateArgs),
    /// Prints the effective run configuration.
    Config(ConfigArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match &cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Config(a) => show_config(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stride: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
