use thiserror::Error;

/// Coarse error classes shared across the workspace. The CLI maps each class
/// to a stable exit code, so downstream tooling can branch on failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad flags / arguments.
    Usage,
    /// A referenced file or directory does not exist.
    MissingInput,
    /// A config or checkpoint is inconsistent with what the command expects.
    ConfigMismatch,
    /// Data on disk is malformed or inconsistent with its manifest.
    Data,
    /// A numeric failure: solver blow-up, NaN during training or sampling.
    Numeric,
    /// Everything else.
    Internal,
}

impl ErrorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Usage => "usage",
            ErrorClass::MissingInput => "missing-input",
            ErrorClass::ConfigMismatch => "config-mismatch",
            ErrorClass::Data => "data",
            ErrorClass::Numeric => "numeric",
            ErrorClass::Internal => "internal",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage => 2,
            ErrorClass::MissingInput => 3,
            ErrorClass::ConfigMismatch => 4,
            ErrorClass::Data => 5,
            ErrorClass::Numeric => 6,
            ErrorClass::Internal => 70,
        }
    }
}

/// Implemented by every error type in the workspace so the CLI can derive
/// a machine-parseable class without downcasting.
pub trait Classify {
    fn class(&self) -> ErrorClass;
}

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error in {path}: {message}")]
    Manifest { path: String, message: String },
    #[error("{file}: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        file: String,
        expected: u64,
        actual: u64,
    },
    #[error("invalid {what}: {message}")]
    Invalid { what: &'static str, message: String },
    #[error("trajectories use mixed grids: {message}")]
    MixedGrids { message: String },
    #[error("variable '{variable}' has zero variance; drop it or add jitter before normalization")]
    ZeroVariance { variable: String },
    #[error("non-finite value in {what} at flat index {index}")]
    NonFinite { what: String, index: usize },
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: String,
        expected: String,
        actual: String,
    },
}

impl Classify for CoreError {
    fn class(&self) -> ErrorClass {
        match self {
            CoreError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                ErrorClass::MissingInput
            }
            CoreError::Io { .. } => ErrorClass::Data,
            CoreError::Manifest { .. } | CoreError::SizeMismatch { .. } => ErrorClass::Data,
            CoreError::Invalid { .. } | CoreError::MixedGrids { .. } => ErrorClass::ConfigMismatch,
            CoreError::ZeroVariance { .. } => ErrorClass::Data,
            CoreError::NonFinite { .. } => ErrorClass::Numeric,
            CoreError::ShapeMismatch { .. } => ErrorClass::ConfigMismatch,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
