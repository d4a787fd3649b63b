//! Command-line harness: instance generation, training, evaluation tables
//! and single-instance solving with route plots.
//!
//! Exit codes: 0 success, 2 argument error, 3 data or parse error,
//! 4 internal invariant failure.

pub mod args;
pub mod commands;
pub mod manifest;
pub mod report;
pub mod svg;

use std::ffi::OsString;

use clap::Parser;
use thiserror::Error;

use gase::checkpoint::CheckpointError;
use gase::instances::InstanceError;
use gase::model::ModelError;
use gase::numkernel::KernelError;
use gase::trainer::TrainError;

pub use args::{Cli, Command};
pub use commands::{cmd_evaluate, cmd_generate, cmd_solve, cmd_train};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Argument(String),
    #[error("{0}")]
    Data(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Argument(_) => 2,
            CliError::Data(_) => 3,
            CliError::Internal(_) => 4,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<InstanceError> for CliError {
    fn from(e: InstanceError) -> Self {
        match e {
            InstanceError::Argument(m) => CliError::Argument(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => CliError::Argument(m),
            ModelError::Batch(m) => CliError::Data(m),
            ModelError::Kernel(k) => k.into(),
        }
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Argument(m) => CliError::Argument(m),
            TrainError::Invariant(m) => CliError::Internal(m),
            TrainError::Model(m) => m.into(),
            TrainError::Kernel(k) => k.into(),
            TrainError::Instance(i) => i.into(),
            TrainError::Checkpoint(m) => CliError::Data(m),
            TrainError::Io(e) => CliError::Data(e.to_string()),
        }
    }
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Solve(a) => cmd_solve(a),
    };
    match result {
        Ok(out) => {
            print!("{}", out.text);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
