use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("division by exact zero in elementwise op")]
    DivisionByZero,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is detached from every trainable leaf")]
    DetachedGraph,

    #[error("backward already ran on this graph; build a fresh graph for the next pass")]
    BackwardAlreadyRun,

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("empty text")]
    EmptyText,

    #[error("sequence of {len} tokens exceeds the context length {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("defect `{0}` is already registered")]
    DuplicateDefect(String),

    #[error("aggregated abnormal prototype is degenerate (near-zero norm)")]
    DegenerateAggregate,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("non-finite loss at epoch {epoch} step {step}; batch dump written to {dump}")]
    NonFiniteLoss { epoch: usize, step: usize, dump: PathBuf },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
