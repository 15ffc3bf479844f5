//! Sentence-level BLEU-4.
//!
//! Clipped n-gram precisions for n = 1..4, geometric mean, brevity penalty
//! against the reference closest in length. A zero count for n >= 2 is
//! smoothed to `(0 + 1) / (total + 1)`; a zero unigram match gives 0.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{CalecError, Result};

pub const MAX_N: usize = 4;

fn ngrams<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// `(matched, total)` clipped n-gram counts.
pub fn clipped_counts<T: Eq + Hash + Clone>(candidate: &[T], references: &[Vec<T>], n: usize) -> (usize, usize) {
    let cand = ngrams(candidate, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in references {
        for (g, c) in ngrams(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Length of the reference closest to `len`, shorter one on ties.
fn closest_ref_len<T>(len: usize, references: &[Vec<T>]) -> usize {
    references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&r| (r.abs_diff(len), r))
        .expect("references nonempty")
}

pub fn bleu4<T: Eq + Hash + Clone>(candidate: &[T], references: &[Vec<T>]) -> Result<f64> {
    if references.is_empty() {
        return Err(CalecError::Data("BLEU needs at least one reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_N {
        let (m, t) = clipped_counts(candidate, references, n);
        let p = if m > 0 {
            m as f64 / t as f64
        } else if n == 1 {
            return Ok(0.0);
        } else {
            1.0 / (t as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let c = candidate.len() as f64;
    let r = closest_ref_len(candidate.len(), references) as f64;
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * (log_sum / MAX_N as f64).exp())
}
