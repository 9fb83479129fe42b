use std::io;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("argument outside its domain: {0}")]
    Domain(String),

    #[error("iteration did not converge: {0}")]
    Convergence(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("task {0} has no samples")]
    EmptyTask(usize),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("oracle rollout left the safe set after {attempts} attempts")]
    RolloutUnsafe { attempts: usize },

    #[error("method {0} needs a learned model but none was supplied")]
    ModelMissing(&'static str),

    /// Holds the missing path, or the scenario whose checkpoint is needed.
    #[error("checkpoint unavailable: {0}")]
    CheckpointMissing(String),

    #[error("checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
