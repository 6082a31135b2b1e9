use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mscos_cli::commands::{self, Overrides};
use mscos_cli::config::RunConfig;
use mscos_cli::CliError;

#[derive(Parser)]
#[command(name = "mscos", version, about = "Multiscale change-of-support models for bivariate areal data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation scenario and write its RMSE tables.
    Simulate(Flags),
    /// Run MCMC chains and store the draws.
    Fit(Flags),
    /// Predict on the partition support or a target support.
    Predict(Flags),
    /// Compute RMSE, WAIC and Gelman-Rubin diagnostics.
    Evaluate(Flags),
}

#[derive(clap::Args)]
struct Flags {
    /// JSON run config; relative paths inside it resolve against its directory.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (flags, cmd): (&Flags, fn(&RunConfig, &Overrides) -> Result<(), CliError>) = match &cli.command {
        Command::Simulate(f) => (f, commands::simulate),
        Command::Fit(f) => (f, commands::fit),
        Command::Predict(f) => (f, commands::predict),
        Command::Evaluate(f) => (f, commands::evaluate),
    };
    if let Some(n) = flags.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    let cfg = RunConfig::load(&flags.config)?;
    cmd(&cfg, &Overrides { seed: flags.seed, out: flags.out.clone() })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
