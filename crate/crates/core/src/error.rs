//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its documented range or is inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Input data contains NaN/Inf or is otherwise unusable.
    #[error("corrupt data: {0}")]
    CorruptData(String),

    /// Tensor rank or dimensions do not match the operation's contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An internal contract between modules was violated (e.g. parameter
    /// schemas differ, or a supposedly unit-norm vector is not).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The projection head mapped a feature vector to (numerically) zero,
    /// so it cannot be normalized onto the hypersphere.
    #[error("degenerate projection: norm {norm} below {min}")]
    DegenerateProjection { norm: f64, min: f64 },

    /// A distortion failed while being applied.
    #[error("distortion '{name}' failed: {reason}")]
    DistortionFailed { name: String, reason: String },

    /// Training produced a non-finite loss and aborted.
    #[error("numerical abort: {0}")]
    NumericalAbort(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 2,
            Error::CorruptData(_) | Error::Shape(_) | Error::Io(_) | Error::Serialization(_) => 3,
            Error::NumericalAbort(_) => 4,
            Error::Contract(_) | Error::DegenerateProjection { .. } => 3,
            Error::DistortionFailed { .. } => 3,
        }
    }
}
