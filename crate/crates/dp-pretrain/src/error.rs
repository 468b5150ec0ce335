//! Crate-wide error type and result alias.

use thiserror::Error;

/// Everything that can go wrong across the crate, from bad hyperparameters to
/// corrupt checkpoints. Variants carry enough context to locate the offender
/// without a debugger.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition (range, sign, emptiness).
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Tensor shapes or axis lengths do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An internal invariant was violated (caller misuse of a stateful API).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Corpus or example data is malformed.
    #[error("data error: {0}")]
    Data(String),

    /// Configuration rejected; `path` is the dotted key that failed.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// Noise calibration could not bracket or reach the target.
    #[error("calibration failed: {0}")]
    Calibration(String),

    /// Checkpoint file is structurally invalid.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Helper for the common "bad parameter" case.
    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { path: path.into(), message: message.into() }
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }

    /// Exit code the CLI maps this error to: 1 for configuration and argument
    /// problems caught before work starts, 2 for failures during execution.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Parameter(_) | Error::Config { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
