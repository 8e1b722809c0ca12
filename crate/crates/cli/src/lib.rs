//! Command-line front end: training runs, ablations, sweeps, theory checks,
//! synthetic data export and report merging. Every command writes a
//! `manifest.json` next to its outputs.

pub mod args;
pub mod commands;
pub mod error;
pub mod io;
pub mod manifest;
pub mod report;

pub use error::{code, CliError, CliResult};

use args::{Cli, Command};

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::AblateDistill(a) => commands::ablate_distill(a),
        Command::AblateClassifier(a) => commands::ablate_classifier(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::TheoryCheck(a) => commands::theory_check(a),
        Command::GenData(a) => commands::gen_data(a),
        Command::Report(a) => commands::report(a),
    }
}
