use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("graph has no nodes")]
    EmptyGraph,

    #[error("sub-graphs belong to different graphs ({0} vs {1})")]
    ParentMismatch(String, String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar([usize; 2]),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("node {node} out of range for graph with {len} nodes")]
    NodeOutOfRange { node: usize, len: usize },

    #[error("no negative sub-graphs available for a balanced batch")]
    NoNegatives,

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("consensus reference database is empty")]
    EmptyReferenceDb,

    #[error("region {0} does not overlap any node box at IoU >= 0.5")]
    NoRegionMatch(usize),

    #[error("unknown metric `{0}`")]
    UnknownMetric(String),

    #[error("candidate caption is empty")]
    EmptyCandidate,

    #[error("expected caption sets of size {expected}, got {got}")]
    BadSetSize { expected: usize, got: usize },

    #[error("aligned node {0} has no bounding box")]
    MissingBoxes(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that come from the numeric substrate rather than from
    /// bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::ShapeMismatch { .. } | Error::NotScalar(_) | Error::NonFinite(_)
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
