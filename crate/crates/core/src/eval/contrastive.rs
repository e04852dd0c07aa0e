use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::corpus::{join_segments, ContrastiveExample};
use crate::error::{Error, Result};
use crate::model::{score_encoded, ScoreNorm, TransformerModel};
use crate::subword::{TextCodec, START_ID};

/// Scores candidate targets for one source; higher is better.
pub trait CandidateScorer {
    fn score(&mut self, source: &str, candidates: &[String]) -> Result<Vec<f64>>;
}

/// Teacher-forced log-probability under a transformer.
pub struct ModelCandidateScorer<'a, T: Real> {
    pub model: &'a TransformerModel<T>,
    pub codec: &'a TextCodec,
    pub norm: ScoreNorm,
}

impl<T: Real> CandidateScorer for ModelCandidateScorer<'_, T> {
    fn score(&mut self, source: &str, candidates: &[String]) -> Result<Vec<f64>> {
        let enc = self.model.encode(&self.codec.encode(source))?;
        candidates
            .iter()
            .map(|c| {
                let ids = self.codec.encode(c);
                let target = ids.strip_prefix(&[START_ID]).unwrap_or(&ids);
                score_encoded(self.model, &enc, target, self.norm)
            })
            .collect()
    }
}

/// How an example with several contrastive variants is counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    /// Correct iff the reference beats every variant.
    #[default]
    AllVariants,
    /// Every reference/variant pair is a separate trial.
    PerPair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

impl Bucket {
    fn new(correct: usize, total: usize) -> Self {
        Bucket {
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            correct,
            total,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveReport {
    pub accuracy: f64,
    pub correct: usize,
    /// Trials: examples, or reference/variant pairs in per-pair mode.
    pub total: usize,
    pub n_examples: usize,
    /// Keyed `0`, `1`, `2+` or `unknown`.
    pub per_distance: BTreeMap<String, Bucket>,
    pub mode: AccuracyMode,
    pub context_window: usize,
}

pub fn distance_bucket(distance: Option<usize>) -> &'static str {
    match distance {
        Some(0) => "0",
        Some(1) => "1",
        Some(_) => "2+",
        None => "unknown",
    }
}

/// Source and candidate texts in multi-segment form, using at most the `k`
/// most recent context segments.
pub fn contrastive_inputs(ex: &ContrastiveExample, k: usize) -> (String, Vec<String>) {
    let used = k.min(ex.ctx_src.len()).min(ex.ctx_tgt.len());
    let ctx_src = &ex.ctx_src[ex.ctx_src.len() - used..];
    let ctx_tgt = &ex.ctx_tgt[ex.ctx_tgt.len() - used..];
    let mut src: Vec<&str> = ctx_src.iter().map(String::as_str).collect();
    src.push(&ex.src);
    let candidates = std::iter::once(&ex.reference)
        .chain(&ex.contrastive_variants)
        .map(|c| {
            let mut segs: Vec<&str> = ctx_tgt.iter().map(String::as_str).collect();
            segs.push(c);
            join_segments(&segs)
        })
        .collect();
    (join_segments(&src), candidates)
}

/// Targeted accuracy. `k = 0` scores without context. Ties count as wrong.
pub fn contrastive_accuracy(
    scorer: &mut dyn CandidateScorer,
    examples: &[ContrastiveExample],
    k: usize,
    mode: AccuracyMode,
) -> Result<ContrastiveReport> {
    let mut buckets: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let (mut correct, mut total) = (0, 0);
    for (i, ex) in examples.iter().enumerate() {
        ex.validate().map_err(|msg| Error::Validation { index: i, msg })?;
        let (source, candidates) = contrastive_inputs(ex, k);
        let scores = scorer.score(&source, &candidates)?;
        if scores.len() != candidates.len() {
            return Err(Error::State(format!(
                "scorer returned {} scores for {} candidates",
                scores.len(),
                candidates.len()
            )));
        }
        let reference = scores[0];
        let (c, t) = match mode {
            AccuracyMode::AllVariants => (usize::from(scores[1..].iter().all(|&s| reference > s)), 1),
            AccuracyMode::PerPair => (scores[1..].iter().filter(|&&s| reference > s).count(), scores.len() - 1),
        };
        correct += c;
        total += t;
        let b = buckets.entry(distance_bucket(ex.antecedent_distance).to_string()).or_default();
        b.0 += c;
        b.1 += t;
    }
    Ok(ContrastiveReport {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        n_examples: examples.len(),
        per_distance: buckets.into_iter().map(|(k, (c, t))| (k, Bucket::new(c, t))).collect(),
        mode,
        context_window: k,
    })
}
