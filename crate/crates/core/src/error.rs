use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: String,
        found: String,
    },

    #[error("mask value {value} at voxel {index} is not 0 or 1")]
    NonBinaryMask { value: f32, index: usize },

    #[error("mask selects no voxels")]
    EmptyMask,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("covariance of component {component} is not positive definite")]
    NotPositiveDefinite { component: usize },

    #[error("too few samples: {found} rows, need at least {needed}")]
    TooFewSamples { needed: usize, found: usize },

    #[error("model selection failed: every candidate errored ({0})")]
    SelectionFailed(String),

    #[error("proportions sum to {sum}, not 1")]
    NotNormalized { sum: f64 },

    #[error("class {0} is absent from the input")]
    ClassAbsent(usize),

    #[error("confidence {value} outside [0, 1]")]
    ConfidenceOutOfRange { value: f64 },

    #[error("boosting retained no learners after {rounds} rounds")]
    NoLearners { rounds: usize },

    #[error("fold {fold} is missing class {class} after re-drawing")]
    FoldMissingClass { fold: usize, class: usize },

    #[error("infeasible phantom: {0}")]
    InfeasiblePhantom(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        found: impl std::fmt::Display,
    ) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
