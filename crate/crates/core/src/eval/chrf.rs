use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHRF_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;

/// Per-order character n-gram statistics.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChrfStats {
    pub matches: [u64; CHRF_ORDER],
    pub hyp_counts: [u64; CHRF_ORDER],
    pub ref_counts: [u64; CHRF_ORDER],
}

fn char_ngrams(chars: &[char], n: usize) -> HashMap<&[char], u64> {
    let mut counts = HashMap::new();
    for w in chars.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

impl ChrfStats {
    /// Whitespace is ignored.
    pub fn from_pair(hyp: &str, reference: &str) -> Self {
        let h: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
        let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
        let mut s = ChrfStats::default();
        for n in 1..=CHRF_ORDER {
            let hc = char_ngrams(&h, n);
            let rc = char_ngrams(&r, n);
            s.hyp_counts[n - 1] = hc.values().sum();
            s.ref_counts[n - 1] = rc.values().sum();
            s.matches[n - 1] = hc.iter().map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0))).sum();
        }
        s
    }

    pub fn add(&mut self, o: &ChrfStats) {
        for n in 0..CHRF_ORDER {
            self.matches[n] += o.matches[n];
            self.hyp_counts[n] += o.hyp_counts[n];
            self.ref_counts[n] += o.ref_counts[n];
        }
    }

    /// F-beta of precision and recall averaged over the orders in which
    /// either side has n-grams. Two empty strings score 1.
    pub fn score(&self, beta: f64) -> f64 {
        let mut p_sum = 0.0;
        let mut r_sum = 0.0;
        let mut orders = 0;
        for n in 0..CHRF_ORDER {
            let (h, r, m) = (self.hyp_counts[n], self.ref_counts[n], self.matches[n]);
            if h == 0 && r == 0 {
                continue;
            }
            orders += 1;
            if h > 0 {
                p_sum += m as f64 / h as f64;
            }
            if r > 0 {
                r_sum += m as f64 / r as f64;
            }
        }
        if orders == 0 {
            return 1.0;
        }
        let (p, r) = (p_sum / orders as f64, r_sum / orders as f64);
        let b2 = beta * beta;
        if p + r == 0.0 {
            0.0
        } else {
            (1.0 + b2) * p * r / (b2 * p + r)
        }
    }
}

/// Sentence-level ChrF (n = 6, beta = 2) in [0, 1].
pub fn chrf(hyp: &str, reference: &str) -> f64 {
    ChrfStats::from_pair(hyp, reference).score(CHRF_BETA)
}

/// ChrF from statistics pooled over a corpus.
pub fn corpus_chrf<S: AsRef<str>, R: AsRef<str>>(hypotheses: &[S], references: &[R]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::contract(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut total = ChrfStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        total.add(&ChrfStats::from_pair(h.as_ref(), r.as_ref()));
    }
    Ok(total.score(CHRF_BETA))
}
