use thiserror::Error;

/// Errors produced by the attention stack, cache, policies and allocator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("layer {layer}: position {position} is not present in the cache")]
    UnknownPosition { layer: usize, position: usize },

    #[error("layer {layer}: decode-time position {position} cannot be evicted")]
    DecodeEviction { layer: usize, position: usize },

    #[error("missing head scores for layer {0}")]
    MissingHeadScores(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
