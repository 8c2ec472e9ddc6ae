use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eit_shape::Error;

mod commands;
mod config;
mod output;

use commands::Outcome;
use config::{ConfigError, Overrides, RunConfig};

/// Level-set reconstruction of conductivity inclusions from boundary data.
#[derive(Parser, Debug)]
#[command(name = "eit-shape", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Noise seed (overrides the config).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Write field dumps every K iterations.
    #[arg(long, global = true, value_name = "K")]
    dump_every: Option<usize>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate boundary measurements for the true shape.
    Synth,
    /// Run the level-set reconstruction.
    Reconstruct,
    /// Run the tensor calculus and equilibrium checks.
    Verify {
        /// Add an equilibrium case with an inconsistent target; the run then fails.
        #[arg(long)]
        negative_control: bool,
        /// Boundary panels of the fine quadrature.
        #[arg(long, value_name = "M")]
        panels: Option<usize>,
    },
    /// Compare difference quotients of the cost with the shape derivative.
    DerivCheck,
    /// Print mesh and shape statistics.
    MeshInfo,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 4;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::SolverFailure { .. }) => 5,
        Some(_) => 4,
        None => 1,
    }
}

fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    let overrides = Overrides { out: cli.out.clone(), seed: cli.seed, dump_every: cli.dump_every };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Reconstruct => commands::reconstruct(&cfg),
        Command::Verify { negative_control, panels } => commands::verify(&cfg, *negative_control, *panels),
        Command::DerivCheck => commands::deriv_check(&cfg),
        Command::MeshInfo => commands::mesh_info(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { log::LevelFilter::Error } else { log::LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).parse_default_env().format_timestamp(None).init();
    match run(&cli) {
        Ok(outcome) => ExitCode::from(outcome.code()),
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
