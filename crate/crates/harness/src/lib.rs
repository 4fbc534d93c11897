//! Training, evaluation and experiment protocols for the BEV detector with
//! ground-truth-flow guidance.

pub mod config;
pub mod data;
pub mod eval;
pub mod experiments;
pub mod report;
pub mod train;

use std::path::{Path, PathBuf};

use gtbev::metrics::MetricsError;
use gtbev::model::checkpoint::CheckpointError;
use gtbev::scene::SceneError;
use gtbev::tensor::TensorError;
use thiserror::Error;

pub use config::{ExperimentConfig, GtFlowSwitches};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: String,
        #[source]
        source: CheckpointError,
    },
    #[error("tensor op: {0}")]
    Tensor(#[from] TensorError),
}

impl HarnessError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn checkpoint(path: impl AsRef<Path>, source: CheckpointError) -> Self {
        Self::Checkpoint {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 for invalid input, 3 for numerical failure, 1
    /// otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Scene(SceneError::Io(_))
            | Self::Metrics(MetricsError::Scene(SceneError::Io(_))) => 1,
            Self::Validation(_) | Self::Scene(_) | Self::Metrics(_) => 2,
            Self::Checkpoint {
                source:
                    CheckpointError::Shape { .. }
                    | CheckpointError::Missing(_)
                    | CheckpointError::Format(_),
                ..
            } => 2,
            Self::Numerical(_) => 3,
            _ => 1,
        }
    }
}
