//! Training, evaluation and analysis harness around `resmoe-core`: dataset
//! ingestion, run configuration, checkpointing, reports and the CLI.

pub mod analyze;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod report;
pub mod sweep;
pub mod train;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] resmoe_core::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit code: 2 for anything wrong with inputs, 3 for numeric
    /// failures at runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
