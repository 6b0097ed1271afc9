use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Caller supplied something outside an operation's contract.
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown direction `{0}`")]
    UnknownDirection(String),
    #[error("unknown ablation `{0}`")]
    UnknownAblation(String),
    #[error("missing checkpoint at {0}")]
    MissingCheckpoint(PathBuf),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] sfe_tensor::TensorError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("format error: {0}")]
    Format(String),
    /// A trained component missed the quality bar it is gated on.
    #[error("quality gate failed: {0}")]
    QualityGate(String),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Whether the error stems from bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::Invalid(_)
                | Self::Shape(_)
                | Self::UnknownDirection(_)
                | Self::UnknownAblation(_)
                | Self::MissingCheckpoint(_)
                | Self::Incompatible(_)
                | Self::Config(_)
        )
    }
}

impl From<serde_json::Error> for CoreError {
    fn from(e: serde_json::Error) -> Self {
        Self::Format(e.to_string())
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Invalid(msg.into()))
}
