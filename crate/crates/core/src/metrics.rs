//! Edit-distance text metrics: alignment counts, character error rate and
//! word accuracy.
//!
//! Strings are compared as sequences of Unicode scalar values with no
//! normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Operation counts of one minimal-cost alignment of a prediction against a
/// reference. Insertions are extra prediction characters, deletions are
/// reference characters missing from the prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Character error rate together with the reference length it was normalized by.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CerValue {
    pub value: f64,
    pub reference_length: usize,
}

/// Counts from the canonical minimal alignment.
///
/// When several alignments reach the minimal cost the backtrace prefers a
/// diagonal step (match or substitution), then a deletion, then an insertion.
pub fn edit_counts(prediction: &str, reference: &str) -> EditCounts {
    let pred: Vec<char> = prediction.chars().collect();
    let refr: Vec<char> = reference.chars().collect();
    let (m, n) = (pred.len(), refr.len());
    let cols = n + 1;

    let mut dist = vec![0usize; (m + 1) * cols];
    for j in 0..=n {
        dist[j] = j;
    }
    for i in 1..=m {
        dist[i * cols] = i;
        for j in 1..=n {
            let diag = dist[(i - 1) * cols + j - 1] + usize::from(pred[i - 1] != refr[j - 1]);
            let del = dist[i * cols + j - 1] + 1;
            let ins = dist[(i - 1) * cols + j] + 1;
            dist[i * cols + j] = diag.min(del).min(ins);
        }
    }

    let mut counts = EditCounts::default();
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        let here = dist[i * cols + j];
        if i > 0 && j > 0 {
            let mismatch = pred[i - 1] != refr[j - 1];
            if dist[(i - 1) * cols + j - 1] + usize::from(mismatch) == here {
                if mismatch {
                    counts.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && dist[i * cols + j - 1] + 1 == here {
            counts.deletions += 1;
            j -= 1;
        } else {
            counts.insertions += 1;
            i -= 1;
        }
    }
    counts
}

/// `(s + i + d) / max(1, n)` where `n` is the reference length in characters.
pub fn cer(prediction: &str, reference: &str) -> CerValue {
    let reference_length = reference.chars().count();
    let edits = edit_counts(prediction, reference).total();
    CerValue {
        value: edits as f64 / reference_length.max(1) as f64,
        reference_length,
    }
}

/// Fraction of positions where the prediction equals the reference exactly.
pub fn word_accuracy<P, R>(predictions: &[P], references: &[R]) -> Result<f64>
where
    P: AsRef<str>,
    R: AsRef<str>,
{
    if predictions.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("word accuracy of an empty list".into()));
    }
    let correct = predictions
        .iter()
        .zip(references)
        .filter(|(p, r)| p.as_ref() == r.as_ref())
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}
