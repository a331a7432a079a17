use thiserror::Error;

/// Errors raised anywhere in the training stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("dimension error at layer {layer} ({kind}): {message}")]
    Layer {
        layer: usize,
        kind: &'static str,
        message: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index out of range: {0}")]
    Range(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training failed at iter {iter}: {source}")]
    AtIter {
        iter: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub fn at_iter(self, iter: u64) -> Self {
        match self {
            Error::AtIter { .. } => self,
            other => Error::AtIter {
                iter,
                source: Box::new(other),
            },
        }
    }

    /// Iteration index attached by the trainer, if any.
    pub fn iter(&self) -> Option<u64> {
        match self {
            Error::AtIter { iter, .. } => Some(*iter),
            _ => None,
        }
    }
}
