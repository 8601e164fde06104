//! Scenario-driven experiment runner: simulate filtered closed loops,
//! tabulate buffer fields, train the buffer network, verify certificates,
//! and compare filter modes.

mod commands;
mod scenario;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "pcbf", version, about = "Predictive CBF scenario runner")]
struct Cli {
    /// Worker threads for grid tabulation and rollout collection
    /// (falls back to PCBF_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (overrides the scenario's `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the scenario's filter mode and export the trajectory.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Optimize the buffer over the scenario's state grid.
    TabulateDelta {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the buffer network on the scenario.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check the certificate conditions along a stored trajectory.
    Verify {
        #[arg(long)]
        config: PathBuf,
        /// Trajectory CSV produced by `simulate`.
        #[arg(long)]
        trajectory: PathBuf,
    },
    /// Simulate several scenarios and print a summary table.
    Compare {
        /// Scenario configs, one row each.
        configs: Vec<PathBuf>,
    },
}

fn exit_code_for(err: &pcbf::Error) -> u8 {
    match err {
        pcbf::Error::Config(_) | pcbf::Error::Format(_) | pcbf::Error::Precondition(_) => 2,
        pcbf::Error::Divergence { .. } => 3,
        pcbf::Error::FilterInfeasible { .. } | pcbf::Error::DeltaInfeasible => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();

    let threads = cli.threads.or_else(|| {
        std::env::var("PCBF_THREADS")
            .ok()
            .and_then(|s| s.parse().ok())
    });
    if let Some(k) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("pcbf: could not size the thread pool: {e}");
        }
    }

    let result = match &cli.command {
        Command::Simulate { config } => commands::simulate(config, &cli.seed, &cli.out),
        Command::TabulateDelta { config } => commands::tabulate_delta(config, &cli.seed, &cli.out),
        Command::Train { config } => commands::train(config, &cli.seed, &cli.out),
        Command::Verify { config, trajectory } => {
            commands::verify(config, trajectory, &cli.seed, &cli.out)
        }
        Command::Compare { configs } => commands::compare(configs, &cli.seed, &cli.out),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("pcbf: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
