//! Token-level recognition metrics: exact match and edit-distance
//! tolerant rates.
//!
//! Token edit distance stands in for structural label-graph scoring, so
//! the rates are not directly comparable with official benchmark figures.

use std::collections::HashMap;
use std::fmt;

use crate::data::Vocab;
use crate::{Error, Result};

/// Levenshtein distance with unit substitution, insertion and deletion.
pub fn token_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub n_samples: usize,
    pub exprate: f64,
    pub le1_rate: f64,
    pub le2_rate: f64,
    pub mean_distance: f64,
}

impl EvalResult {
    /// Aggregates per-sample distances.
    pub fn from_distances(distances: &[usize]) -> Self {
        let n = distances.len();
        let rate = |k: usize| {
            if n == 0 {
                0.0
            } else {
                distances.iter().filter(|&&d| d <= k).count() as f64 / n as f64
            }
        };
        EvalResult {
            n_samples: n,
            exprate: rate(0),
            le1_rate: rate(1),
            le2_rate: rate(2),
            mean_distance: if n == 0 { 0.0 } else { distances.iter().sum::<usize>() as f64 / n as f64 },
        }
    }

    /// Machine-readable `key=value` lines.
    pub fn to_key_values(&self) -> String {
        format!(
            "n_samples={}\nexprate={:?}\nle1_rate={:?}\nle2_rate={:?}\nmean_distance={:?}\n",
            self.n_samples, self.exprate, self.le1_rate, self.le2_rate, self.mean_distance
        )
    }
}

impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples           {}", self.n_samples)?;
        writeln!(f, "ExpRate           {:.2}%", 100.0 * self.exprate)?;
        writeln!(f, "<=1 token error   {:.2}%", 100.0 * self.le1_rate)?;
        writeln!(f, "<=2 token errors  {:.2}%", 100.0 * self.le2_rate)?;
        write!(f, "mean edit distance {:.4}", self.mean_distance)
    }
}

/// Scores `predictions` against `truths`, both `(id, markup)` rows.
///
/// Both sides are tokenized with `vocab` and must cover exactly the same
/// ids; the error lists the ids that are missing or unexpected.
pub fn evaluate(predictions: &[(String, String)], truths: &[(String, String)], vocab: &Vocab) -> Result<EvalResult> {
    let mut pred: HashMap<&str, &str> = HashMap::new();
    for (id, text) in predictions {
        if pred.insert(id, text).is_some() {
            return Err(Error::Config(format!("duplicate prediction for {id}")));
        }
    }
    let missing: Vec<&str> = truths.iter().map(|(id, _)| id.as_str()).filter(|id| !pred.contains_key(id)).collect();
    let truth_ids: HashMap<&str, ()> = truths.iter().map(|(id, _)| (id.as_str(), ())).collect();
    let mut extra: Vec<&str> = pred.keys().copied().filter(|id| !truth_ids.contains_key(id)).collect();
    extra.sort_unstable();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Config(format!(
            "prediction ids do not match truth ids; missing: [{}]; unexpected: [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    let distances = truths
        .iter()
        .map(|(id, truth)| {
            let t = vocab.tokenize(truth)?;
            let p = vocab.tokenize(pred[id.as_str()])?;
            Ok(token_edit_distance(&p, &t))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult::from_distances(&distances))
}
