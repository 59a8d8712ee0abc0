//! Categorized CLI errors; the category drives the process exit code.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("error[config]: {0}")]
    Config(String),
    #[error("error[io]: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("error[data]: {0}")]
    Data(String),
    #[error("error[run]: {0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Data(_) => 4,
            CliError::Run(_) => 5,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<fedsim_core::Error> for CliError {
    fn from(e: fedsim_core::Error) -> Self {
        match e {
            fedsim_core::Error::Io { path, source } => CliError::Io { path, source },
            fedsim_core::Error::Parse { .. } | fedsim_core::Error::LabelOutOfRange { .. } => {
                CliError::Data(e.to_string())
            }
            other => CliError::Run(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
