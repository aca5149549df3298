use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid model structure: {0}")]
    Structure(String),

    #[error("unknown task id {task} (have {count} tasks)")]
    Task { task: usize, count: usize },

    #[error("enumeration of {count} structures exceeds the bound of {bound}")]
    Capacity { count: u128, bound: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error on `{key}`: {message}")]
    Validation { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn validation(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            key: key.into(),
            message: message.into(),
        }
    }
}
