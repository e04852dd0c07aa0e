//! Translation metrics and analyses.

mod bleu;
mod chrf;
mod contrastive;
mod length;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use bleu::{bleu, corpus_stats, tokenize_13a, BleuStats, BLEU_SIGNATURE, MAX_ORDER};
pub use chrf::{chrf, corpus_chrf, ChrfStats, CHRF_BETA, CHRF_ORDER};
pub use contrastive::{
    contrastive_accuracy, contrastive_inputs, distance_bucket, AccuracyMode, Bucket, CandidateScorer, ContrastiveReport,
    ModelCandidateScorer,
};
pub use length::{length_binned_bleu, BinReport, LengthBins};

use crate::error::{Error, Result};

/// How much a model's output changes when context is supplied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    /// Percentage of lines that differ after whitespace normalization.
    pub changed_pct: f64,
    /// Mean over lines of `1 - chrf(with, without)`.
    pub cs_chrf: f64,
    pub n_lines: usize,
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn context_sensitivity<S: AsRef<str>, R: AsRef<str>>(with_ctx: &[S], without_ctx: &[R]) -> Result<Sensitivity> {
    if with_ctx.len() != without_ctx.len() {
        return Err(Error::contract(format!(
            "{} lines with context but {} without",
            with_ctx.len(),
            without_ctx.len()
        )));
    }
    let n = with_ctx.len();
    if n == 0 {
        return Ok(Sensitivity {
            changed_pct: 0.0,
            cs_chrf: 0.0,
            n_lines: 0,
        });
    }
    let mut changed = 0;
    let mut distance = 0.0;
    for (a, b) in with_ctx.iter().zip(without_ctx) {
        let (a, b) = (normalize_ws(a.as_ref()), normalize_ws(b.as_ref()));
        changed += usize::from(a != b);
        distance += 1.0 - chrf(&a, &b);
    }
    Ok(Sensitivity {
        changed_pct: 100.0 * changed as f64 / n as f64,
        cs_chrf: distance / n as f64,
        n_lines: n,
    })
}

/// Metric bundle; absent analyses are omitted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu_signature: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chrf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_distance_accuracy: Option<BTreeMap<String, Bucket>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_bin_bleu: Option<Vec<BinReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensitivity_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cs_chrf: Option<f64>,
    pub n_examples: usize,
}

impl EvalReport {
    /// BLEU and ChrF of a hypothesis set.
    pub fn translation<S: AsRef<str>, R: AsRef<str>>(hypotheses: &[S], references: &[R]) -> Result<Self> {
        Ok(EvalReport {
            bleu: Some(bleu(hypotheses, references)?),
            bleu_signature: Some(BLEU_SIGNATURE.to_string()),
            chrf: Some(corpus_chrf(hypotheses, references)?),
            n_examples: hypotheses.len(),
            ..EvalReport::default()
        })
    }

    pub fn contrastive(report: &ContrastiveReport) -> Self {
        EvalReport {
            accuracy: Some(report.accuracy),
            per_distance_accuracy: Some(report.per_distance.clone()),
            n_examples: report.n_examples,
            ..EvalReport::default()
        }
    }

    /// Checks the declared ranges and that bin counts cover every example.
    pub fn validate(&self) -> Result<()> {
        let in_range = |v: Option<f64>, hi: f64| v.is_none_or(|x| (0.0..=hi).contains(&x));
        if !in_range(self.bleu, 100.0) || !in_range(self.chrf, 1.0) || !in_range(self.accuracy, 1.0) {
            return Err(Error::contract("metric outside its range"));
        }
        if !in_range(self.sensitivity_pct, 100.0) || !in_range(self.cs_chrf, 1.0) {
            return Err(Error::contract("sensitivity outside its range"));
        }
        if let Some(bins) = &self.per_bin_bleu {
            let sum: usize = bins.iter().map(|b| b.count).sum();
            if sum != self.n_examples {
                return Err(Error::contract(format!(
                    "bin counts sum to {sum}, expected {}",
                    self.n_examples
                )));
            }
        }
        Ok(())
    }
}
