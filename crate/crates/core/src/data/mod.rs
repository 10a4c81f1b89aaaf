//! Samples, vocabulary, InkML input, rasterization and batching.

mod batch;
pub mod crohme;
mod index;
mod inkml;
mod raster;
pub mod synth;
mod vocab;

use std::path::PathBuf;

use thiserror::Error;

pub use batch::{make_bibatch, BiBatch};
pub use index::{load_dataset, read_index, write_index, IndexEntry};
pub use inkml::{parse_inkml, strip_math_delimiters, Ink, StrokeSet};
pub use raster::{rasterize, Bitmap, RasterParams};
pub use vocab::{Vocab, EOS, PAD, RESERVED, SOS};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("InkML parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },
    #[error("unknown token {token:?} at position {position}")]
    UnknownToken { token: String, position: usize },
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("sample {id}: {len} tokens do not fit L_max = {l_max}")]
    TooLong { id: String, len: usize, l_max: usize },
    #[error("{what} line {line}: {message}")]
    Format { what: String, line: usize, message: String },
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
    let path = path.into();
    move |source| DataError::Io { path, source }
}

/// One training or test example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Bitmap,
    /// Token ids without start or stop symbols; never empty.
    pub tokens: Vec<usize>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Bitmap, tokens: Vec<usize>) -> Result<Self> {
        let id = id.into();
        if tokens.is_empty() {
            return Err(DataError::Invalid(format!("sample {id} has no tokens")));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t < RESERVED) {
            return Err(DataError::Invalid(format!("sample {id} contains reserved id {t}")));
        }
        Ok(Sample { id, image, tokens })
    }
}

#[cfg(test)]
mod tests;
