use thiserror::Error;

/// Errors raised by the modelling engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("overlap rows for coarse unit `{coarse}` sum to {total} but the unit area is {area}")]
    InconsistentOverlap { coarse: String, total: f64, area: f64 },

    #[error("partition matrix rows {row_a} and {row_b} overlap (P P' off-diagonal = {value:e})")]
    DisjointnessViolation { row_a: usize, row_b: usize, value: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("chain aborted at iteration {iteration}: {source}")]
    ChainFailure {
        iteration: usize,
        state: String,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
