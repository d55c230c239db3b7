#![allow(dead_code)]

use docclean::imaging::Image;
use docclean::neural::LogitsSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error with a floor on the denominator so coordinates whose true
/// gradient is essentially zero are judged on absolute error.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `loss` with respect to coordinate `i` of `x`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut loss: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let plus = loss(x);
    x[i] = orig - h;
    let minus = loss(x);
    x[i] = orig;
    (plus - minus) / (2.0 * h)
}

pub fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::from_vec(h, w, (0..h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

pub fn random_log_probs(t: usize, k: usize, rng: &mut ChaCha8Rng) -> LogitsSequence {
    let mut v = Vec::with_capacity(t * k);
    for _ in 0..t {
        let row: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        v.extend(row.iter().map(|x| x - lse));
    }
    LogitsSequence::new(t, k, v).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Exhaustive CTC: sum the probability of every frame path that collapses to `label`.
pub fn brute_force_ctc(seq: &LogitsSequence, label: &[usize]) -> f64 {
    let (t_len, k) = (seq.timesteps, seq.classes);
    let mut total = 0.0;
    let mut path = vec![0usize; t_len];
    let count = k.pow(t_len as u32);
    for mut code in 0..count {
        for slot in path.iter_mut() {
            *slot = code % k;
            code /= k;
        }
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &c in &path {
            if Some(c) != prev && c != 0 {
                collapsed.push(c);
            }
            prev = Some(c);
        }
        if collapsed == label {
            total += path.iter().enumerate().map(|(t, &c)| seq.at(t, c)).sum::<f64>().exp();
        }
    }
    -total.ln()
}

/// Levenshtein distance by plain recursion over the edit lattice.
pub fn brute_levenshtein(a: &[char], b: &[char]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let sub = brute_levenshtein(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
    let del = brute_levenshtein(a, &b[1..]) + 1;
    let ins = brute_levenshtein(&a[1..], b) + 1;
    sub.min(del).min(ins)
}

/// Every string over `alphabet` of length at most `max_len`.
pub fn all_strings(alphabet: &[char], max_len: usize) -> Vec<String> {
    let mut out = vec![String::new()];
    let mut frontier = vec![String::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for &c in alphabet {
                let mut t = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}
