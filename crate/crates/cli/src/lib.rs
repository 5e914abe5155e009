//! Command-line front end: training runs, numerical verification, probes,
//! ablation tables and plot-ready reports.
//!
//! Exit status is 0 on success, 1 for invalid input or I/O failures and 2
//! when a numerical check fails its tolerance.

pub mod ablate;
pub mod config;
pub mod error;
pub mod manifest;
pub mod output;
pub mod probe;
pub mod report;
pub mod train;
pub mod verify;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "aemlab", version, about = "Entropy-modulated policy optimization on tabular agents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration and write logs, checkpoints and a manifest.
    Train(train::TrainArgs),
    /// Check drift identities and entropy nesting numerically.
    Verify(verify::VerifyArgs),
    /// Correlate coefficient shifts with surprisal deviations on visited states.
    ProbeConsistency(probe::ConsistencyArgs),
    /// Test that summed token surprisal minus entropy is a zero-mean martingale.
    ProbeDoob(probe::DoobArgs),
    /// Compare early and late entropy of paired baseline and treatment runs.
    ProbeTransition(probe::TransitionArgs),
    /// Train every variant over shared seeds and tabulate mean and spread.
    Ablate(ablate::AblateArgs),
    /// Turn run directories into aligned CSV series.
    Report(report::ReportArgs),
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Train(a) => train::cmd_train(a),
        Command::Verify(a) => verify::cmd_verify(a),
        Command::ProbeConsistency(a) => probe::cmd_consistency(a),
        Command::ProbeDoob(a) => probe::cmd_doob(a),
        Command::ProbeTransition(a) => probe::cmd_transition(a),
        Command::Ablate(a) => ablate::cmd_ablate(a),
        Command::Report(a) => report::cmd_report(a),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
