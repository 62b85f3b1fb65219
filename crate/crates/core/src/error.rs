use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("row {row}: {message}")]
    InvalidRow { row: usize, message: String },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no death events")]
    NoDeaths,

    #[error("no events to fit")]
    NoEvents,

    #[error("arm {0} has no subjects")]
    EmptyArm(u8),

    #[error("empty input")]
    EmptyInput,

    #[error("singular information matrix: {0}")]
    Singular(String),

    #[error("weight table does not cover event time {0}")]
    MissingWeights(f64),

    #[error("only {converged} of {requested} bootstrap replicates converged")]
    TooFewReplicates { converged: usize, requested: usize },

    #[error("flat pseudo-likelihood: {0}")]
    FlatLikelihood(String),
}

pub type Result<T> = std::result::Result<T, Error>;
