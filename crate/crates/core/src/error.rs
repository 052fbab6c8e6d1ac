use std::path::PathBuf;

use thiserror::Error;

use crate::scene::Task;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate view: {0}")]
    DegenerateView(String),

    #[error("singular homography (|det| = {0:e})")]
    SingularHomography(f64),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("unknown situation `{0}`")]
    UnknownSituation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("placement failure: {0}")]
    PlacementFailure(String),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("task mismatch: expected {expected}, got {actual}")]
    TaskMismatch { expected: Task, actual: Task },

    #[error("training split is empty")]
    EmptySplit,

    #[error("situation mismatch: expected `{expected}`, split was generated for `{actual}`")]
    SituationMismatch { expected: String, actual: String },

    #[error("splits are not twins: {0}")]
    NotTwins(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no valid ground-truth pixels")]
    NoValidPixels,

    #[error("score set is empty")]
    EmptyScoreSet,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("lifecycle violation: {0}")]
    Lifecycle(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
