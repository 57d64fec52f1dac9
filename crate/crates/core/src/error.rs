use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("unsupported feature in {path}: {reason}")]
    Unsupported { path: PathBuf, reason: String },
    #[error("declared shape {shape:?} needs {expected} voxels but payload has {actual}")]
    ShapeDataMismatch {
        shape: [usize; 3],
        expected: usize,
        actual: usize,
    },
    #[error("volume grids differ (shape/spacing/origin)")]
    GridMismatch,
    #[error("volume has no positive voxels")]
    EmptyVolume,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("cloud too small: need at least {needed} points, have {have}")]
    CloudTooSmall { needed: usize, have: usize },
    #[error("degenerate cloud: zero spatial extent")]
    DegenerateCloud,
    #[error("cloud carries no normalization transform")]
    MissingTransform,
    #[error("clouds carry different normalization transforms")]
    TransformMismatch,
    #[error("cloud is in frame {found}, expected {expected}")]
    WrongFrame {
        expected: &'static str,
        found: &'static str,
    },
    #[error("k={k} too large for {available} available reference points")]
    KTooLarge { k: usize, available: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("group budget mismatch: pipeline {pipeline_in}->{pipeline_out}, checkpoint {model_in}->{model_out}")]
    BudgetMismatch {
        pipeline_in: usize,
        pipeline_out: usize,
        model_in: usize,
        model_out: usize,
    },
    #[error("non-finite value produced at step {step}")]
    Divergence { step: usize },
    #[error("non-finite values in model output")]
    NonFinite,
    #[error("{0}")]
    InvalidInput(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Coarse classification used by the CLI for its exit-code contract.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}
