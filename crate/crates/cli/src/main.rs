use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Congestion-event prediction with spatio-temporal graph neural point processes.
#[derive(Parser, Debug)]
#[command(name = "stgnpp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run configuration file of `key=value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for simulation, initialisation and batch order.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dataset directory (graph.csv, speeds.csv, events.csv).
    #[arg(long, global = true, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Model checkpoint to evaluate, predict with or resume from.
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate {
        #[arg(long)]
        links: Option<usize>,
        #[arg(long)]
        days: Option<f64>,
        /// `standard` or `homogeneous`.
        #[arg(long)]
        scenario: Option<String>,
    },
    /// Train a model and save the best-validation checkpoint.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint and the Historical Average baseline on the test split.
    Eval,
    /// Predict the next event on every link from one history window.
    Predict {
        /// Exclusive end slot of the window; defaults to the end of the data.
        #[arg(long, value_name = "SLOT")]
        end_slot: Option<usize>,
    },
    /// Run the built-in property checks.
    Selftest,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = commands::configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(commands::exit_code(&e));
    }
    let result = match cli.command {
        Command::Simulate { links, days, scenario } => {
            commands::simulate(&cli.common, links, days, scenario.as_deref())
        }
        Command::Train { epochs } => commands::train(&cli.common, epochs),
        Command::Eval => commands::eval(&cli.common),
        Command::Predict { end_slot } => commands::predict(&cli.common, end_slot),
        Command::Selftest => commands::selftest(&cli.common),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
