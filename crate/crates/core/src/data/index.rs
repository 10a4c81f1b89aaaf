use std::path::{Path, PathBuf};

use super::{io_err, Bitmap, DataError, Result, Sample, Vocab};

/// One `path<TAB>truth` line of a dataset index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub path: PathBuf,
    pub truth: String,
}

pub fn read_index(path: impl AsRef<Path>) -> Result<Vec<IndexEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (p, truth) = line.split_once('\t').ok_or_else(|| DataError::Format {
            what: path.display().to_string(),
            line: i + 1,
            message: "expected `path<TAB>truth`".into(),
        })?;
        out.push(IndexEntry { path: PathBuf::from(p), truth: truth.to_string() });
    }
    Ok(out)
}

pub fn write_index(path: impl AsRef<Path>, entries: &[IndexEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for e in entries {
        let p = e.path.to_string_lossy();
        if p.contains(['\t', '\n']) || e.truth.contains(['\t', '\n']) {
            return Err(DataError::Invalid(format!("index field contains a tab or newline: {p}")));
        }
        text.push_str(&format!("{p}\t{}\n", e.truth));
    }
    std::fs::write(path, text).map_err(io_err(path))
}

/// Loads PGM images listed in an index; relative paths resolve against the
/// index file's directory. The sample id is the image path as written.
pub fn load_dataset(index_path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<Sample>> {
    let index_path = index_path.as_ref();
    let base = index_path.parent().unwrap_or(Path::new("."));
    read_index(index_path)?
        .into_iter()
        .map(|e| {
            let image = Bitmap::load_pgm(base.join(&e.path))?;
            let tokens = vocab.tokenize(&e.truth)?;
            Sample::new(e.path.to_string_lossy(), image, tokens)
        })
        .collect()
}
