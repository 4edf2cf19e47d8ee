//! Pipeline driver: generate environments, label them with the
//! reachability solver, train the hypernetwork, and run closed-loop
//! studies.
//!
//! Exit codes: 0 success, 1 configuration/input validation error,
//! 2 runtime error.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "reachmpc", version, about = "Safe local planning toolkit")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override for the subcommand's randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of random local environments.
    GenEnvs {
        #[arg(long)]
        out: PathBuf,
        /// Number of base environments.
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Also emit the 8 dihedral variants of every environment.
        #[arg(long)]
        augment: bool,
    },
    /// Compute value-function labels for a dataset (resumable).
    Label {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the hypernetwork on a labeled dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset (full set and its own
    /// validation split).
    EvalModel {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional JSON output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a single closed-loop episode and write its trace.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// Constraint mode: sdf | dcbf | ntc | ntc-oracle.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        horizon: Option<usize>,
        /// World: the deterministic wall scenario or a random map.
        #[arg(long, default_value = "fig1")]
        scenario: String,
        /// Checkpoint (required for ntc).
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Paired Monte Carlo study over random environments.
    MonteCarlo {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated modes; defaults to the config list.
        #[arg(long)]
        modes: Option<String>,
        /// Comma-separated horizons; defaults to the config list.
        #[arg(long)]
        horizons: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Summarize an episodes report into plot-ready tables.
    Report {
        /// report.json file or the directory containing it.
        #[arg(long, name = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenEnvs { ref out, count, augment } => {
            commands::gen_envs(cli.config.as_deref(), cli.seed, out, count, augment)
        }
        Command::Label { ref data } => commands::label(cli.config.as_deref(), data),
        Command::Train { ref data, ref out } => {
            commands::train(cli.config.as_deref(), cli.seed, data, out)
        }
        Command::EvalModel { ref ckpt, ref data, ref out } => {
            commands::eval_model(ckpt, data, out.as_deref())
        }
        Command::Simulate { ref out, ref mode, horizon, ref scenario, ref ckpt } => {
            commands::simulate(
                cli.config.as_deref(),
                cli.seed,
                out,
                mode,
                horizon,
                scenario,
                ckpt.as_deref(),
            )
        }
        Command::MonteCarlo { ref out, ref modes, ref horizons, episodes, ref ckpt } => {
            commands::monte_carlo(
                cli.config.as_deref(),
                cli.seed,
                out,
                modes.as_deref(),
                horizons.as_deref(),
                episodes,
                ckpt.as_deref(),
            )
        }
        Command::Report { ref input, ref out } => commands::report(input, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(commands::CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
