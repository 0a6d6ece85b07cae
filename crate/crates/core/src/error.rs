use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("infeasible constraints: {0}")]
    Infeasible(String),

    #[error("group {group} has {size} items but requires at least {lower}")]
    GroupTooSmall { group: usize, lower: usize, size: usize },

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: missing gid field")]
    MissingGroup { line: usize },

    #[error("line {line}: feature dimension {found} differs from {expected}")]
    InconsistentFeatureDim {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("dataset contains no items")]
    EmptyDataset,

    #[error("need at least 2 queries to split, found {0}")]
    TooFewQueries(usize),

    #[error("cannot sample from an empty pool")]
    EmptyPool,

    #[error("requested {slots} slots from a pool of {pool}")]
    SlotsExceedPool { slots: usize, pool: usize },

    #[error("item {0} is not in the pool")]
    ItemNotInPool(usize),

    #[error("item {0} appears more than once")]
    DuplicateItem(usize),

    #[error("instance too large to enumerate: {0}")]
    TooLarge(String),

    #[error("no fair ranking after {0} trials")]
    Exhausted(usize),

    #[error("non-finite value during training: {0}")]
    NonFiniteLoss(String),

    #[error("greedy re-ranking reached a dead end at rank {0}")]
    ConstructionFailure(usize),

    #[error("unknown query {0}")]
    UnknownQuery(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
