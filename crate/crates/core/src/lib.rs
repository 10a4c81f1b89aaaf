//! Bidirectionally trained transformer for image-to-markup recognition.
//!
//! A DenseNet encoder turns a bitmap into a position-encoded feature
//! memory; one transformer decoder models the markup both left-to-right and
//! right-to-left, and decoding combines the two directions.

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod selfcheck;
pub mod training;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A loss or gradient stopped being finite.
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<std::path::PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
