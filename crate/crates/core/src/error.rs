use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A document did not match the expected schema.
    #[error("parse error in `{field}`: {message}")]
    Parse { field: String, message: String },

    /// A value was well-formed but violated a type invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("value {value} out of range [{min}, {max}] for q={q}")]
    Range { value: i64, min: i64, max: i64, q: u8 },

    #[error("length mismatch: expected {expected}, got {actual}")]
    Length { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("integer overflow in {0}")]
    Overflow(&'static str),

    /// The mapping does not fit on the chip.
    #[error("capacity exceeded: {tasks} tasks for {macros} macros")]
    Capacity { tasks: usize, macros: usize },

    /// No V-f pair can recover from an IR failure.
    #[error("unrecoverable: {0}")]
    Unrecoverable(String),

    /// Fine-tuning loss kept rising.
    #[error("divergence: loss increased for {0} consecutive steps")]
    Divergence(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad input rather than by a failing run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::Range { .. }
                | Error::Length { .. }
                | Error::Shape(_)
                | Error::Capacity { .. }
                | Error::Json { .. }
        )
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Range { .. } => "range",
            Error::Length { .. } => "length",
            Error::Shape(_) => "shape",
            Error::Overflow(_) => "overflow",
            Error::Capacity { .. } => "capacity",
            Error::Unrecoverable(_) => "unrecoverable",
            Error::Divergence(_) => "divergence",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }
}
