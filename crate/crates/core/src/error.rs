use spkguard_autograd::AutogradError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn config_err(msg: impl Into<String>) -> CoreError {
    CoreError::Config(msg.into())
}

pub(crate) fn input_err(msg: impl Into<String>) -> CoreError {
    CoreError::Input(msg.into())
}
