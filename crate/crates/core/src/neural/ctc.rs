//! CTC loss by the log-space forward-backward recursion, and greedy decoding.

use serde::{Deserialize, Serialize};

use super::alphabet::{Alphabet, BLANK};
use super::ops::log_sum_exp;
use crate::error::{Error, Result};

/// Per-timestep log-probabilities, `T x classes`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitsSequence {
    pub timesteps: usize,
    pub classes: usize,
    pub values: Vec<f64>,
}

impl LogitsSequence {
    pub fn new(timesteps: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != timesteps * classes {
            return Err(Error::InvalidArgument(format!(
                "{} values for a {timesteps}x{classes} sequence",
                values.len()
            )));
        }
        Ok(LogitsSequence {
            timesteps,
            classes,
            values,
        })
    }

    #[inline]
    pub fn at(&self, t: usize, k: usize) -> f64 {
        self.values[t * self.classes + k]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.classes..(t + 1) * self.classes]
    }
}

/// Smallest sequence length that can emit `label`: one frame per symbol plus
/// a separating blank between equal neighbours.
pub fn min_timesteps(label: &[usize]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `label` (class indices, no blanks) and its
/// gradient with respect to every entry of the log-probability matrix.
pub fn ctc_loss_indices(logits: &LogitsSequence, label: &[usize]) -> Result<(f64, Vec<f64>)> {
    let t_len = logits.timesteps;
    let k = logits.classes;
    if label.iter().any(|&c| c == BLANK || c >= k) {
        return Err(Error::InvalidArgument("label contains blank or out-of-range class".into()));
    }
    if min_timesteps(label) > t_len {
        return Err(Error::InvalidArgument(format!(
            "label of length {} needs {} timesteps, sequence has {t_len}",
            label.len(),
            min_timesteps(label)
        )));
    }

    // extended label: blank, l1, blank, l2, ..., blank
    let s_len = 2 * label.len() + 1;
    let ext: Vec<usize> = (0..s_len).map(|s| if s % 2 == 0 { BLANK } else { label[s / 2] }).collect();
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = logits.at(0, ext[0]);
    if s_len > 1 {
        alpha[1] = logits.at(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = [prev[s], neg, neg];
            if s >= 1 {
                acc[1] = prev[s - 1];
            }
            if can_skip(s) {
                acc[2] = prev[s - 2];
            }
            alpha[t * s_len + s] = log_sum_exp(&acc) + logits.at(t, ext[s]);
        }
    }

    let mut beta = vec![neg; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = logits.at(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = logits.at(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = [next[s], neg, neg];
            if s + 1 < s_len {
                acc[1] = next[s + 1];
            }
            if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                acc[2] = next[s + 2];
            }
            beta[t * s_len + s] = log_sum_exp(&acc) + logits.at(t, ext[s]);
        }
    }

    let tail = &alpha[last..last + s_len];
    let log_p = if s_len > 1 {
        log_sum_exp(&[tail[s_len - 1], tail[s_len - 2]])
    } else {
        tail[0]
    };
    if !log_p.is_finite() {
        return Err(Error::Numerical {
            block: "ctc".into(),
            detail: "label has zero probability under the sequence".into(),
        });
    }

    // d(-log p)/d lp[t,k] = -sum_{s: ext[s]=k} exp(alpha + beta - lp[t,k] - log p)
    let mut grad = vec![0.0; t_len * k];
    let mut per_class = vec![neg; k];
    let mut scratch: Vec<f64> = Vec::with_capacity(s_len);
    for t in 0..t_len {
        per_class.fill(neg);
        for (c, slot) in per_class.iter_mut().enumerate() {
            scratch.clear();
            scratch.extend(
                (0..s_len)
                    .filter(|&s| ext[s] == c)
                    .map(|s| alpha[t * s_len + s] + beta[t * s_len + s]),
            );
            if !scratch.is_empty() {
                *slot = log_sum_exp(&scratch);
            }
        }
        for c in 0..k {
            if per_class[c] > neg {
                grad[t * k + c] = -(per_class[c] - logits.at(t, c) - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// CTC loss of a text label under an alphabet.
pub fn ctc_loss(logits: &LogitsSequence, label: &str, alphabet: &Alphabet) -> Result<(f64, Vec<f64>)> {
    if logits.classes != alphabet.classes() {
        return Err(Error::InvalidArgument(format!(
            "sequence has {} classes, alphabet has {}",
            logits.classes,
            alphabet.classes()
        )));
    }
    ctc_loss_indices(logits, &alphabet.encode(label)?)
}

/// Per-step argmax (lowest index on ties), collapse repeats, drop blanks.
pub fn greedy_decode_indices(logits: &LogitsSequence) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..logits.timesteps {
        let row = logits.row(t);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

pub fn greedy_decode(logits: &LogitsSequence, alphabet: &Alphabet) -> String {
    greedy_decode_indices(logits)
        .into_iter()
        .filter_map(|i| alphabet.char_at(i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot_path(path: &[usize], classes: usize) -> LogitsSequence {
        let mut v = vec![-5.0; path.len() * classes];
        for (t, &c) in path.iter().enumerate() {
            v[t * classes + c] = -0.1;
        }
        LogitsSequence::new(path.len(), classes, v).unwrap()
    }

    #[test]
    fn single_step_loss() {
        let lp = [(-1.2f64), (-0.7), (-2.0)];
        let seq = LogitsSequence::new(1, 3, lp.to_vec()).unwrap();
        let (loss, grad) = ctc_loss_indices(&seq, &[1]).unwrap();
        assert!((loss - 0.7).abs() < 1e-12);
        assert_eq!(grad, vec![0.0, -1.0, 0.0]);
    }

    #[test]
    fn uniform_two_steps_is_log3() {
        let u = (1.0f64 / 3.0).ln();
        let seq = LogitsSequence::new(2, 3, vec![u; 6]).unwrap();
        let (loss, _) = ctc_loss_indices(&seq, &[1]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn too_long_label_rejected() {
        let seq = LogitsSequence::new(2, 3, vec![0.0; 6]).unwrap();
        assert!(ctc_loss_indices(&seq, &[1, 1]).is_err());
        assert!(ctc_loss_indices(&seq, &[1, 2, 1]).is_err());
        assert!(ctc_loss_indices(&seq, &[0]).is_err());
        let seq3 = LogitsSequence::new(3, 3, vec![0.0; 9]).unwrap();
        assert!(ctc_loss_indices(&seq3, &[1, 1]).is_ok());
    }

    #[test]
    fn empty_label_is_all_blank_path() {
        let seq = LogitsSequence::new(3, 2, vec![-0.5, -1.0, -0.25, -2.0, -0.1, -3.0]).unwrap();
        let (loss, _) = ctc_loss_indices(&seq, &[]).unwrap();
        assert!((loss - 0.85).abs() < 1e-12);
    }

    #[test]
    fn greedy_examples() {
        let a = Alphabet::new(['a', 'b']).unwrap();
        assert_eq!(greedy_decode(&one_hot_path(&[1, 1, 0, 1], 3), &a), "aa");
        assert_eq!(greedy_decode(&one_hot_path(&[0, 0, 0], 3), &a), "");
        assert_eq!(greedy_decode(&one_hot_path(&[0, 2, 2, 0, 2], 3), &a), "bb");
        let tie = LogitsSequence::new(1, 3, vec![-1.0, -1.0, -1.0]).unwrap();
        assert_eq!(greedy_decode(&tie, &a), "");
    }

    #[test]
    fn no_underflow_for_tiny_probabilities() {
        // every path probability is around 1e-30 per frame
        let lp = (1e-30f64).ln();
        let seq = LogitsSequence::new(6, 3, vec![lp; 18]).unwrap();
        let (loss, grad) = ctc_loss_indices(&seq, &[1, 2]).unwrap();
        assert!(loss.is_finite());
        assert!(grad.iter().all(|g| g.is_finite()));
    }
}
