use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("action {action} out of range for {n_actions} actions")]
    ActionOutOfRange { action: usize, n_actions: usize },

    #[error("action kind does not match the policy head")]
    ActionKindMismatch,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid kernel bandwidth {0}")]
    InvalidBandwidth(f64),

    #[error("empty trajectory")]
    EmptyTrajectory,

    #[error("preferred set is empty")]
    EmptyPreferredSet,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid map: {0}")]
    InvalidMap(String),

    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    /// Raised by a preference source when training was asked to stop while
    /// it waited; ends the run as stopped rather than failed.
    #[error("training stopped")]
    Stopped,

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
