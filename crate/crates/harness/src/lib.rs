//! Experiment runner for the `gridest` estimators.
//!
//! Each experiment reads a [`config::Config`], runs deterministically from
//! its seed and returns a [`artifact::RunArtifact`] holding CSV tables and a
//! short summary.

pub mod artifact;
pub mod cli;
pub mod config;
pub mod experiments;

use thiserror::Error;

pub use artifact::RunArtifact;
pub use config::{Config, ConfigError, Experiment};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Input {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    InputFormat {
        path: String,
        source: gridest::Error,
    },
    #[error("writing {path}: {source}")]
    Output {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Estimation(#[from] gridest::Error),
}

impl HarnessError {
    /// Process exit status: 2 for bad configuration or input files, 3 for
    /// failures during the computation.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Input { .. } | Self::InputFormat { .. } => 2,
            Self::Output { .. } | Self::Estimation(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
