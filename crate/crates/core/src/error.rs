use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss in {0}")]
    NonFiniteLoss(&'static str),

    #[error("invalid maze: {0}")]
    Maze(String),

    #[error("episode already finished")]
    EpisodeDone,

    #[error("goal cell {goal:?} unreachable from {start:?}")]
    Unreachable { start: (usize, usize), goal: (usize, usize) },

    #[error("insufficient open cells: need {needed}, have {available}")]
    InsufficientCells { needed: usize, available: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty codebook")]
    EmptyCodebook,

    #[error("codebook mode mismatch: expected {expected}, codebook is {actual}")]
    ModeMismatch { expected: &'static str, actual: &'static str },

    #[error("config error at `{key}`{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config { key: String, line: Option<usize>, msg: String },

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
