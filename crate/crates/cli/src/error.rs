use std::path::{Path, PathBuf};
use std::process::ExitCode;

use skidsim_core::config::ConfigError;
use thiserror::Error;

/// Everything a subcommand can fail with, split by exit status: input the
/// user must fix exits 2, failures while running exit 1.
#[derive(Debug, Error)]
pub enum CliError {
    /// Scenario file problem, already rendered as `path:line: message`.
    #[error("{0}")]
    Config(String),
    /// Bad invocation or unusable input file (e.g. a trace with missing columns).
    #[error("{0}")]
    Input(String),
    /// A run faulted or a gate failed; outputs were still written.
    #[error("{0}")]
    Fault(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn config(path: &Path, err: ConfigError) -> Self {
        CliError::Config(err.render(path))
    }

    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) | CliError::Input(_) => ExitCode::from(2),
            CliError::Fault(_) | CliError::Io { .. } => ExitCode::from(1),
        }
    }
}
