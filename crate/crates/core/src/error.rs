use std::path::PathBuf;

/// Errors raised anywhere in the laboratory.
///
/// The variants are grouped so the CLI can map each category onto a
/// distinct exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure at {node}: {detail}")]
    Numerical { node: String, detail: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numerical(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            node: node.into(),
            detail: detail.into(),
        }
    }
}
