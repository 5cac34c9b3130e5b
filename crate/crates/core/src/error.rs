use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("out-of-vocabulary word: {0:?}")]
    OutOfVocabulary(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid rank {rank} for a {rows}x{cols} matrix")]
    InvalidRank { rank: usize, rows: usize, cols: usize },

    #[error("degenerate (zero-norm) vector: {0}")]
    DegenerateVector(&'static str),

    #[error("empty bag")]
    EmptyBag,

    #[error("adaptor store holds no tasks")]
    NoTasks,

    #[error("conflict: task {0:?} already exists")]
    Conflict(String),

    #[error("unknown task {0:?}")]
    UnknownTask(String),

    #[error("compatibility error: store was trained against backbone {expected}, found {found}")]
    Compatibility { expected: String, found: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("dataset too small: {0}")]
    TooSmall(String),

    #[error("schema error at row {row}: {msg}")]
    Schema { row: usize, msg: String },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("missing {what} at {}; run `kvadapt {command}` first", path.display())]
    MissingArtifact {
        what: &'static str,
        path: PathBuf,
        command: &'static str,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("png error: {0}")]
    Png(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error line and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidTask(_) => "invalid_task",
            Error::OutOfVocabulary(_) => "oov",
            Error::Dimension(_) => "dimension",
            Error::InvalidInput(_) => "invalid_input",
            Error::SequenceTooLong { .. } => "length",
            Error::InvalidRank { .. } => "invalid_rank",
            Error::DegenerateVector(_) => "degenerate_vector",
            Error::EmptyBag => "empty_bag",
            Error::NoTasks => "no_tasks",
            Error::Conflict(_) => "conflict",
            Error::UnknownTask(_) => "unknown_task",
            Error::Compatibility { .. } => "compatibility",
            Error::InvalidData(_) => "invalid_data",
            Error::TooSmall(_) => "too_small",
            Error::Schema { .. } => "schema",
            Error::MissingFile(_) => "missing_file",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Png(_) => "png",
        }
    }
}
