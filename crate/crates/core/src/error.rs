use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("layout error: {0}")]
    Layout(String),

    #[error("insufficient anomalies: requested k={requested} but only {available} anomalous images are available")]
    InsufficientAnomalies { requested: usize, available: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("no negative pairs: batch contains a single class")]
    NoNegativePairs,

    #[error("underdetermined system: {0}")]
    Underdetermined(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short stable label for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Layout(_) => "layout",
            Error::InsufficientAnomalies { .. } => "insufficient_anomalies",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Contract(_) => "contract",
            Error::Domain(_) => "domain",
            Error::Numeric(_) => "numeric",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::NoNegativePairs => "no_negative_pairs",
            Error::Underdetermined(_) => "underdetermined",
            Error::Training(_) => "training",
            Error::Corrupt(_) => "corrupt",
            Error::Config(_) => "config",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
