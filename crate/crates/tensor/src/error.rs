use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("dtype mismatch: stored {stored:?}, requested {requested:?}")]
    DType { stored: crate::DType, requested: crate::DType },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Format(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
