//! `ppsh`: principal stratum hazard ratio estimation, simulation and
//! diagnostics from the command line.
//!
//! Exit codes: 0 success, 1 error, 2 usage error, 3 outputs written but at
//! least one fit did not converge.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::Status;
use config::Options;

#[derive(Parser, Debug)]
#[command(name = "ppsh", version, about = "Proportional principal stratum hazards toolkit")]
struct Cli {
    /// JSON file supplying any option; command-line flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate one trial and write dataset.csv
    Simulate {
        #[command(flatten)]
        opts: Options,
        /// Generate the mortality-free companion trial
        #[arg(long)]
        hypothetical: bool,
    },
    /// Cause-specific and principal stratum fits over a working gamma grid
    Fit {
        #[command(flatten)]
        opts: Options,
    },
    /// Monte Carlo study reproducing the bias tables
    Replicate {
        #[command(flatten)]
        opts: Options,
    },
    /// Proportionality test on --input, or its calibration on simulated data
    Proptest {
        #[command(flatten)]
        opts: Options,
    },
    /// Copula MPLE, fit assessment and copula principal stratum fits
    Copula {
        #[command(flatten)]
        opts: Options,
    },
}

const EXIT_NOT_CONVERGED: u8 = 3;

fn run(cli: Cli) -> Result<Status> {
    let file = match &cli.config {
        Some(path) => Options::load_file(path)?,
        None => Options::default(),
    };
    match cli.command {
        Command::Simulate { opts, hypothetical } => {
            let opts = opts.merged(file);
            commands::ensure_no_extra_input(&opts, "simulate")?;
            commands::simulate(&opts, hypothetical)
        }
        Command::Fit { opts } => commands::fit(&opts.merged(file)),
        Command::Replicate { opts } => {
            let opts = opts.merged(file);
            commands::ensure_no_extra_input(&opts, "replicate")?;
            commands::replicate_cmd(&opts)
        }
        Command::Proptest { opts } => commands::proptest(&opts.merged(file)),
        Command::Copula { opts } => commands::copula(&opts.merged(file)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Status::Converged) => ExitCode::SUCCESS,
        Ok(Status::NotConverged) => {
            eprintln!("warning: at least one fit did not converge");
            ExitCode::from(EXIT_NOT_CONVERGED)
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// Error chain joined by ": ", skipping causes already quoted by the
/// message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}
