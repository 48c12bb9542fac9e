use std::path::PathBuf;

use thiserror::Error;

/// Failures surfaced by the command-line tool, each with a fixed exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(flowmo_core::Error),
}

impl From<flowmo_core::Error> for CliError {
    fn from(e: flowmo_core::Error) -> Self {
        match e {
            flowmo_core::Error::Numeric(msg) => Self::Numeric(msg),
            flowmo_core::Error::Io(io) => Self::Io(io),
            other => Self::Core(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Io(_) | Self::Core(_) => 1,
            Self::MissingInput(_) => 2,
            Self::Numeric(_) => 3,
        }
    }
}
