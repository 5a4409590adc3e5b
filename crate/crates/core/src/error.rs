use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("insufficient tissue: {found} tissue pixels, need at least {required}")]
    InsufficientTissue { found: usize, required: usize },
    #[error("degenerate stain: {0}")]
    DegenerateStain(String),
    #[error("non-finite prediction at batch index {batch_index}")]
    Numeric { batch_index: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("constraint violated: {0}")]
    Constraint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Zip(#[from] zip::result::ZipError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Schema(_) => "schema",
            Error::Integrity(_) => "integrity",
            Error::EmptyDataset(_) => "empty-dataset",
            Error::Argument(_) => "argument",
            Error::Config(_) => "config",
            Error::InsufficientTissue { .. } => "insufficient-tissue",
            Error::DegenerateStain(_) => "degenerate-stain",
            Error::Numeric { .. } => "numeric",
            Error::Contract(_) => "contract",
            Error::Constraint(_) => "constraint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
            Error::Zip(_) => "zip",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
