//! Command implementations behind the `mstcn` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod metrics;

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] mstcn::Error),
    #[error("training diverged at epoch {epoch}, iteration {iteration}: {source}")]
    Diverged {
        epoch: u64,
        iteration: u64,
        #[source]
        source: mstcn::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
