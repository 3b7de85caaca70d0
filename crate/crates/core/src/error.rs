use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
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
    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("catalog error: {0}")]
    Catalog(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("png codec error: {0}")]
    Png(String),
    #[error("shape error in layer `{layer}`: {msg}")]
    Shape { layer: String, msg: String },
    #[error("graph error: {0}")]
    Graph(String),
    #[error("weights error: {0}")]
    Weights(String),
    #[error("transplant error: {0}")]
    Transplant(String),
    #[error("training diverged at epoch {epoch}, sample `{sample}`: {msg}")]
    Diverged {
        epoch: usize,
        sample: String,
        msg: String,
    },
    #[error("training error: {0}")]
    Training(String),
    #[error("metrics error: {0}")]
    Metrics(String),
    #[error("experiment error: {0}")]
    Experiment(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(layer: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            msg: msg.into(),
        }
    }
}
