use stft_core::{Classify, CoreError, ErrorClass};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("layout error: {0}")]
    Layout(String),
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: String,
        actual: String,
    },
    #[error("{what}: retained modes {m} exceed available modes {available}")]
    Modes {
        what: &'static str,
        m: usize,
        available: usize,
    },
    #[error("non-finite value during {what}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite {
        what: &'static str,
        step: Option<usize>,
    },
    #[error("checkpoint error in {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("checkpoint pairing mismatch: flow checkpoint was trained against {expected}, got {actual}")]
    PairingMismatch { expected: String, actual: String },
}

impl Classify for ModelError {
    fn class(&self) -> ErrorClass {
        match self {
            ModelError::Core(e) => e.class(),
            ModelError::Layout(_) | ModelError::Shape { .. } | ModelError::Modes { .. } => {
                ErrorClass::ConfigMismatch
            }
            ModelError::NonFinite { .. } => ErrorClass::Numeric,
            ModelError::Checkpoint { .. } => ErrorClass::Data,
            ModelError::PairingMismatch { .. } => ErrorClass::ConfigMismatch,
        }
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;
