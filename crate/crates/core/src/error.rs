use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("evaluation has no usable image pairs")]
    EmptyEvaluation,

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("input {height}x{width} is smaller than the minimum {min}x{min}")]
    InputTooSmall { height: usize, width: usize, min: usize },

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("proposal provider returned no proposals")]
    NoProposals,

    #[error("could not place object {index} of {total} after {attempts} attempts")]
    PlacementFailure {
        index: usize,
        total: usize,
        attempts: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("non-finite value in {module}::{op}")]
    Numerical {
        module: &'static str,
        op: &'static str,
    },

    #[error("split `{split}` shares classes with the counter's training set: {classes:?}")]
    ClassLeak { split: String, classes: Vec<String> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }
}

/// Fails with [`Error::Numerical`] if any value is NaN or infinite.
pub(crate) fn ensure_finite(values: &[f64], module: &'static str, op: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical { module, op })
    }
}
