use serde::{Deserialize, Serialize};

use super::bleu::{corpus_stats, BleuStats};
use crate::error::{Error, Result};

/// Four length partitions derived from training-data statistics:
/// `[0, m]`, `(m, m+2sd]`, `(m+2sd, m+4sd]`, `(m+4sd, inf)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBins {
    pub median: f64,
    pub sd: f64,
}

impl LengthBins {
    pub fn new(median: f64, sd: f64) -> Result<Self> {
        if !(median >= 0.0 && sd >= 0.0) {
            return Err(Error::contract(format!("invalid length statistics m={median} sd={sd}")));
        }
        Ok(LengthBins { median, sd })
    }

    /// Median and population standard deviation of `lengths`.
    pub fn from_lengths(lengths: &[usize]) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::contract("length statistics of an empty set"));
        }
        let mut sorted = lengths.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        };
        let mean = sorted.iter().sum::<usize>() as f64 / n as f64;
        let var = sorted.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        LengthBins::new(median, var.sqrt())
    }

    /// Upper bounds of the first three bins.
    pub fn boundaries(&self) -> [f64; 3] {
        [self.median, self.median + 2.0 * self.sd, self.median + 4.0 * self.sd]
    }

    pub fn bin_of(&self, length: usize) -> usize {
        let l = length as f64;
        self.boundaries().iter().position(|&b| l <= b).unwrap_or(3)
    }

    pub fn labels(&self) -> [String; 4] {
        let [a, b, c] = self.boundaries();
        [format!("(0,{a}]"), format!("({a},{b}]"), format!("({b},{c}]"), format!("({c},inf)")]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub label: String,
    pub count: usize,
    /// `None` for an empty bin.
    pub bleu: Option<f64>,
}

/// BLEU per length bin of the source.
pub fn length_binned_bleu<S: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[S],
    references: &[R],
    source_lengths: &[usize],
    bins: &LengthBins,
) -> Result<Vec<BinReport>> {
    if hypotheses.len() != references.len() || hypotheses.len() != source_lengths.len() {
        return Err(Error::contract(format!(
            "{} hypotheses, {} references, {} source lengths",
            hypotheses.len(),
            references.len(),
            source_lengths.len()
        )));
    }
    let mut stats = vec![BleuStats::default(); 4];
    let mut counts = [0usize; 4];
    for ((h, r), &len) in hypotheses.iter().zip(references).zip(source_lengths) {
        let b = bins.bin_of(len);
        counts[b] += 1;
        stats[b].add(&corpus_stats(&[h.as_ref()], &[r.as_ref()])?);
    }
    Ok(bins
        .labels()
        .into_iter()
        .zip(stats.iter().zip(counts))
        .map(|(label, (s, count))| BinReport {
            label,
            count,
            bleu: (count > 0).then(|| s.score()),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn appendix_style_bins() {
        let bins = LengthBins::new(15.0, 9.0).unwrap();
        assert_eq!(bins.bin_of(10), 0);
        assert_eq!(bins.bin_of(15), 0);
        assert_eq!(bins.bin_of(20), 1);
        assert_eq!(bins.bin_of(33), 1);
        assert_eq!(bins.bin_of(34), 2);
        assert_eq!(bins.bin_of(51), 2);
        assert_eq!(bins.bin_of(60), 3);
    }

    #[test]
    fn stats_from_lengths() {
        let bins = LengthBins::from_lengths(&[1, 2, 3, 4]).unwrap();
        assert_eq!(bins.median, 2.5);
        assert!((bins.sd - 1.25f64.sqrt()).abs() < 1e-12);
    }
}
