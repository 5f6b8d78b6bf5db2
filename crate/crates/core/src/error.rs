use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown token {token:?} at position {position}")]
    UnknownToken { token: String, position: usize },

    #[error("class id {id} out of range for vocabulary of size {size}")]
    InvalidId { id: usize, size: usize },

    #[error("malformed token sequence: {0}")]
    MalformedSequence(String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("{path}: line {line}: {source}")]
    Manifest {
        path: PathBuf,
        line: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("vocabulary hash mismatch: checkpoint {checkpoint}, dataset {dataset}")]
    VocabMismatch { checkpoint: String, dataset: String },

    #[error("non-finite loss at step {step}: cls={cls} counting={counting}")]
    NonFiniteLoss { step: usize, cls: f64, counting: f64 },

    #[error("step {step} outside schedule of {total} steps")]
    ScheduleRange { step: usize, total: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable category used by the command-line error prefix.
    pub fn category(&self) -> &'static str {
        match self {
            Error::UnknownToken { .. } | Error::InvalidId { .. } | Error::MalformedSequence(_) => {
                "token"
            }
            Error::InvalidVocabulary(_) => "vocab",
            Error::Manifest { .. } | Error::Empty(_) => "data",
            Error::MissingFile(_) | Error::Io(_) => "io",
            Error::Config(_) | Error::Json(_) => "config",
            Error::Shape(_) | Error::LengthMismatch { .. } => "shape",
            Error::VocabMismatch { .. } => "vocab-mismatch",
            Error::NonFiniteLoss { .. } => "nan-loss",
            Error::ScheduleRange { .. } => "schedule",
            Error::Checkpoint(_) => "checkpoint",
            Error::Tensor(_) => "tensor",
            Error::Image(_) => "image",
        }
    }
}
