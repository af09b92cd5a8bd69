use thiserror::Error;

/// Error type shared by every module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left} and {right}")]
    DimensionMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("{what} out of range: got {value}, limit {limit}")]
    IndexOutOfRange {
        what: &'static str,
        value: usize,
        limit: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("missing gradient on parameter `{0}`")]
    MissingGrad(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Training/numeric abort (non-finite loss or gradients). Carries the
    /// diagnostics the training loop collected at the point of failure.
    #[error("numerical abort at step {step}: {reason} (lr={lr}, grad_norm={grad_norm})")]
    Numerical {
        step: u64,
        reason: String,
        lr: f64,
        grad_norm: f64,
    },

    #[error("unknown character {0:?} not in vocabulary")]
    UnknownChar(char),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
