use std::path::PathBuf;

/// Errors produced by the model, data pipeline and training loop.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor did not have the shape an operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration values, missing or corrupt weights, checkpoint mismatches.
    #[error("configuration error: {0}")]
    Config(String),

    /// Corpus layout problems, undecodable images, empty splits.
    #[error("data error: {0}")]
    Data(String),

    /// A loss or metric became non-finite.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}
