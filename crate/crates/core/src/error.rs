use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("input size {height}x{width} is not divisible by {divisor}")]
    InputSize { height: usize, width: usize, divisor: usize },

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("stage error: {0}")]
    Stage(String),

    #[error("ensemble has no learner with positive weight")]
    EmptyEnsemble,

    #[error("similarity undefined: {0}")]
    UndefinedSimilarity(String),

    #[error("dataset error in {path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error("missing file {path}: {hint}")]
    MissingFile { path: PathBuf, hint: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable machine-readable kind used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::InputSize { .. } => "input_size",
            Error::InvalidMask(_) => "invalid_mask",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::Stage(_) => "stage",
            Error::EmptyEnsemble => "empty_ensemble",
            Error::UndefinedSimilarity(_) => "undefined_similarity",
            Error::Dataset { .. } => "dataset",
            Error::MissingFile { .. } => "missing_file",
            Error::Checkpoint(_) => "checkpoint",
            Error::Locked(_) => "locked",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Parse { .. } => "parse",
            Error::Csv(_) => "csv",
        }
    }
}
