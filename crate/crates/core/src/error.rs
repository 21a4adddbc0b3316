//! Crate-wide error type.
//!
//! Variants are grouped by failure family so callers (notably the CLI) can
//! map them to stable exit codes without string matching.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed RVOL pair, graph file, or parameter file.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Input is constant or otherwise carries no usable signal.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A mask contains no liver voxels (label 1).
    #[error("mask contains no liver voxels (label 1)")]
    EmptyLiver,

    /// Cosine similarity is undefined for a zero-norm node feature.
    #[error("zero-norm feature at node {0}: cosine similarity undefined")]
    ZeroNormFeature(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Node/edge losses require equal node counts; callers may fall back to
    /// transport-only alignment.
    #[error("graph cardinality mismatch: {student} student vs {teacher} teacher nodes")]
    CardinalityMismatch { student: usize, teacher: usize },

    /// The requested combination of options cannot produce a result.
    #[error("unusable configuration: {0}")]
    UnusableConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
