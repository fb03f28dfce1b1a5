use thiserror::Error;

/// Errors raised by fitting, filtering and simulation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss during training at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },
    #[error("encoder pool is empty")]
    EmptyPool,
    #[error("observation contains non-finite values")]
    NonFiniteObservation,
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("calibration failed: {0}")]
    CalibrationFailed(String),
    #[error("empty input")]
    EmptyInput,
    #[error("series is constant, correlation undefined")]
    ConstantSeries,
    #[error("serialization: {0}")]
    Serialization(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
