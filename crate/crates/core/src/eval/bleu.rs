//! Corpus-level 4-gram BLEU over token ids.
//!
//! * n-gram matches are clipped by reference counts;
//! * an order with zero matches uses 0.1 as its numerator;
//! * an order with no hypothesis n-grams at all contributes precision 1;
//! * BP = min(1, exp(1 − r/c)) with c, r the total hypothesis and reference
//!   lengths. An empty hypothesis corpus scores 0.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;
pub const SMOOTHING: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(seq: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts = HashMap::new();
    for w in seq.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

pub fn bleu<H: AsRef<[TokenId]>, R: AsRef<[TokenId]>>(
    hypotheses: &[H],
    references: &[R],
) -> Result<BleuScore> {
    if hypotheses.is_empty() {
        return Err(Error::validation("no hypotheses to score"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::validation(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hypotheses.iter().zip(references) {
        let (h, rf) = (h.as_ref(), rf.as_ref());
        c += h.len();
        r += rf.len();
        for n in 1..=MAX_ORDER {
            let ref_counts = ngram_counts(rf, n);
            for (gram, count) in ngram_counts(h, n) {
                matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let precisions: [f64; MAX_ORDER] = std::array::from_fn(|i| match (totals[i], matches[i]) {
        (0, _) => 1.0,
        (t, 0) => SMOOTHING / t as f64,
        (t, m) => m as f64 / t as f64,
    });
    let brevity_penalty = if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c.max(1) as f64).exp()
    };
    let score = if c == 0 {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        (100.0 * brevity_penalty * log_mean.exp()).min(100.0)
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty,
        hyp_len: c,
        ref_len: r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_perfect() {
        let refs = vec![vec![4, 5, 6, 7, 8], vec![9, 10], vec![11]];
        let s = bleu(&refs, &refs).unwrap();
        assert_eq!(s.score, 100.0);
        assert_eq!(s.brevity_penalty, 1.0);
    }

    #[test]
    fn disjoint_is_near_zero() {
        // With the 0.1 numerator floor the bound needs a dozen or more tokens.
        let refs = vec![(4..24).collect::<Vec<TokenId>>()];
        let hyps = vec![(100..120).collect::<Vec<TokenId>>()];
        let s = bleu(&hyps, &refs).unwrap();
        assert!(s.score < 1.0 && s.score > 0.0, "{}", s.score);
    }

    #[test]
    fn short_hypothesis_is_penalized() {
        let refs = vec![vec![4, 5, 6, 7, 8, 9, 10, 11]];
        let hyps = vec![vec![4, 5, 6, 7]];
        let s = bleu(&hyps, &refs).unwrap();
        assert!((s.brevity_penalty - (-1.0f64).exp()).abs() < 1e-15);
        assert!((s.score - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn errors_and_empty_output() {
        let empty: Vec<Vec<TokenId>> = vec![];
        assert!(bleu(&empty, &empty).is_err());
        assert!(bleu(&[vec![4]], &[vec![4], vec![5]]).is_err());
        assert_eq!(
            bleu(&[Vec::<TokenId>::new()], &[vec![4, 5]]).unwrap().score,
            0.0
        );
    }
}
