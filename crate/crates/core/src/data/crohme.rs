//! Bundled CROHME-style symbol set and fixtures.

use super::Vocab;

/// Roughly the CROHME symbol inventory, one token per line.
pub const VOCAB_TEXT: &str = include_str!("../../assets/crohme_vocab.txt");

/// `raw<TAB>canonical` truth strings; canonical form separates tokens by
/// single spaces.
pub const FIXTURE_TRUTHS: &str = include_str!("../../assets/fixtures/crohme_truths.tsv");

/// A six-trace `x^{2}+1` document laid out like a CROHME file, including
/// symbol-level annotations nested in trace groups.
pub const FIXTURE_INKML: &str = include_str!("../../assets/fixtures/crohme_style.inkml");

pub fn crohme_vocab() -> Vocab {
    Vocab::parse(VOCAB_TEXT).expect("bundled vocabulary is valid")
}

pub fn fixture_truths() -> Vec<(&'static str, &'static str)> {
    FIXTURE_TRUTHS.lines().filter_map(|l| l.split_once('\t')).collect()
}
