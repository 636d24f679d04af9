use thiserror::Error;

/// Errors raised by the numeric modules.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("bit density {mu} is at or below the read-noise floor {floor}; exposure is unidentifiable")]
    Unidentifiable { mu: f64, floor: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("integration failed after {steps} steps; last accepted theta~ = {last_theta}")]
    Integration { steps: usize, last_theta: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
