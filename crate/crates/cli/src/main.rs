//! Command-line experiment runner.
//!
//! Exit codes: 0 on success, 2 for configuration or usage errors, 3 for
//! failures while running.

mod commands;
mod output;
mod pool;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// A bad flag value or configuration; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "irsnoma", version, about = "IRS-assisted NOMA visible-light network simulator and optimiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Configuration file, or `default` for the built-in defaults.
    #[arg(long, default_value = "default")]
    pub config: String,
    /// Override one setting, e.g. `--set agents.episodes=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Single run seed (overrides `run.seeds`).
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated run seeds (overrides `run.seeds`).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Output directory. Defaults to `$IRSNOMA_OUT` or `run.output_dir`,
    /// plus a per-command subdirectory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq, Debug)]
pub enum Axis {
    Power,
    Mirrors,
    Users,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Power => "power",
            Axis::Mirrors => "mirrors",
            Axis::Users => "users",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a scheme for every seed; writes metrics.csv, config.resolved
    /// and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Scheme to train (overrides `run.scheme`).
        #[arg(long)]
        scheme: Option<String>,
        /// Seeds trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Noise-free rollouts of a checkpoint; never writes checkpoints.
    Evaluate {
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episodes to roll out (default `run.eval_episodes`).
        #[arg(long)]
        episodes: Option<usize>,
        /// Seed for the evaluation episodes (default: the run seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Override settings of the stored configuration, e.g. the optical
        /// power. Sizes of the scene must not change.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// CSV destination; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every (value, scheme, seed) cell of a sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values: watts, mirror counts (perfect
        /// squares) or user counts.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Comma-separated schemes.
        #[arg(long, value_delimiter = ',', default_value = "two_agent")]
        schemes: Vec<String>,
        /// Minimum user rates in Mbit/s; each value adds a curve family.
        #[arg(long, value_delimiter = ',')]
        rmin: Option<Vec<f64>>,
        /// Cells run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Exhaustive grid search on one frozen snapshot (small scenes only).
    Oracle {
        #[command(flatten)]
        common: Common,
        /// The power simplex is sampled in steps of 1/N.
        #[arg(long, default_value_t = 20)]
        power_steps: usize,
        /// Points per mirror angle axis.
        #[arg(long, default_value_t = 9)]
        angle_points: usize,
        /// Keep every N-th grid point in grid.csv; 0 skips the file.
        #[arg(long, default_value_t = 1)]
        sample_every: usize,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some() || e.downcast_ref::<irsnoma::Error>().is_some_and(|e| e.is_config())
    });
    if config {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common, scheme, jobs } => commands::train(&common, scheme.as_deref(), jobs),
        Command::Evaluate {
            checkpoint,
            episodes,
            seed,
            set,
            out,
        } => commands::evaluate(&checkpoint, episodes, seed, &set, out.as_deref()),
        Command::Sweep {
            common,
            axis,
            values,
            schemes,
            rmin,
            jobs,
        } => commands::sweep(&common, axis, &values, &schemes, rmin.as_deref(), jobs),
        Command::Oracle {
            common,
            power_steps,
            angle_points,
            sample_every,
        } => commands::oracle(&common, power_steps, angle_points, sample_every),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
