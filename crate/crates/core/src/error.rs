use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value during {stage}")]
    NumericOverflow { stage: String },

    #[error("sampler diverged at step {step}")]
    Divergence { step: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty batch")]
    EmptyBatch,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape {
            context,
            expected,
            got,
        }
    }

    pub(crate) fn overflow(stage: impl Into<String>) -> Self {
        Error::NumericOverflow {
            stage: stage.into(),
        }
    }
}
