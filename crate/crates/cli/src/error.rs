use rgmm_core::Error;
use thiserror::Error;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_DIMENSION: i32 = 5;
pub const EXIT_DATA: i32 = 6;
pub const EXIT_FIT: i32 = 7;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("i/o: {0}")]
    Io(String),

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Core(e) => match e {
                Error::Io { .. } | Error::MalformedHeader(_) | Error::Format { .. } => EXIT_IO,
                Error::DimensionMismatch { .. } => EXIT_DIMENSION,
                Error::NonBinaryMask { .. }
                | Error::EmptyMask
                | Error::EmptyInput(_)
                | Error::NonFinite(_)
                | Error::TooFewSamples { .. }
                | Error::ClassAbsent(_)
                | Error::FoldMissingClass { .. }
                | Error::InfeasiblePhantom(_) => EXIT_DATA,
                Error::NotPositiveDefinite { .. }
                | Error::SelectionFailed(_)
                | Error::NotNormalized { .. }
                | Error::ConfidenceOutOfRange { .. }
                | Error::NoLearners { .. } => EXIT_FIT,
                Error::InvalidArgument(_) => EXIT_OTHER,
            },
        }
    }
}
