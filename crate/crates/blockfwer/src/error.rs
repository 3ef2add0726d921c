use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite integrand value {value} at node ({u1}, {u2}, {u3})")]
    NonFiniteIntegrand { u1: f64, u2: f64, u3: f64, value: f64 },

    #[error("decision rule violates nesting D3 <= D2 <= D1 at node ({u1}, {u2}, {u3})")]
    NestingViolation { u1: f64, u2: f64, u3: f64 },

    #[error("solver failed at alpha={alpha}: {message}")]
    Solver { alpha: f64, message: String },

    #[error("block {block}: {source}")]
    Block {
        block: String,
        #[source]
        source: Box<Error>,
    },

    #[error("replicate {replicate} (seed {seed}) failed: {source}")]
    Replicate {
        replicate: u64,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {message}")]
    Input { context: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
