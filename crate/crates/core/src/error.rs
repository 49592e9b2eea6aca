use thiserror::Error;

pub type Result<T> = std::result::Result<T, ScrollError>;

#[derive(Debug, Error)]
pub enum ScrollError {
    /// Malformed file contents. `offset` is a byte offset for binary files
    /// and a 1-based line number for CSV.
    #[error("format error at {unit} {offset}: {message}")]
    Format {
        unit: &'static str,
        offset: u64,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate input at row {row}: {message}")]
    Degenerate { row: usize, message: String },

    #[error("schedule/spec error: {0}")]
    Spec(String),

    #[error("class id {class} out of range (class count {class_count})")]
    ClassId { class: usize, class_count: usize },

    #[error("no class has been observed yet")]
    NoClass,

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("linear algebra error: {0}")]
    LinAlg(String),

    #[error("head initialization error: {0}")]
    Init(String),

    #[error("adaptation error: {0}")]
    Adapt(String),

    #[error("stream batch {requested} re-accessed (cursor at {cursor})")]
    StreamReaccess { requested: usize, cursor: usize },

    #[error("position {position} out of range 0..={limit}")]
    OutOfRange { position: usize, limit: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ScrollError {
    pub(crate) fn format(unit: &'static str, offset: u64, message: impl Into<String>) -> Self {
        ScrollError::Format {
            unit,
            offset,
            message: message.into(),
        }
    }

    /// Errors caused by bad user input rather than failures during execution.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            ScrollError::Config(_)
                | ScrollError::Spec(_)
                | ScrollError::Json(_)
                | ScrollError::Format { .. }
                | ScrollError::Data(_)
        )
    }
}
