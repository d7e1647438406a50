use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum PrmError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("capacity exceeded: list of {len} items, model accepts at most {max}")]
    Capacity { len: usize, max: usize },
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("parse error at line {line}, field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("non-finite gradient at step {step} in tensor `{tensor}`")]
    NonFinite { step: u64, tensor: String },
    #[error("missing artifact `{artifact}`; run stage `{stage}` first")]
    Dependency { artifact: String, stage: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PrmError {
    /// True for errors caused by bad configuration or inputs rather than
    /// runtime failures. The CLI maps these to exit code 2.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            PrmError::Config(_)
                | PrmError::Parameter(_)
                | PrmError::Manifest(_)
                | PrmError::Capacity { .. }
                | PrmError::Vocabulary(_)
                | PrmError::Dependency { .. }
                | PrmError::Parse { .. }
        )
    }
}

pub type Result<T, E = PrmError> = std::result::Result<T, E>;
