use thiserror::Error;

/// Errors raised by tensor operations, layer configuration and the I/O formats.
#[derive(Debug, Error)]
pub enum LambdaError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contraction spec error: {0}")]
    Spec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = LambdaError> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(LambdaError::Shape(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(LambdaError::Config(msg.into()))
}
