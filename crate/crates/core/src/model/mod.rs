//! Transformer encoder-decoder: configuration, parameter counting,
//! differentiable forward pass, incremental inference and checkpoints.

pub mod checkpoint;
mod config;
mod infer;
mod transformer;

pub use config::{parameter_count, ModelConfig, PRESETS};
pub use infer::{DecoderState, EncodedSource};
pub use transformer::{DropoutCtx, PaddedBatch, TransformerModel};

use crate::autodiff::Real;
use crate::error::Result;

/// How token log-probabilities are aggregated into a sequence score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScoreNorm {
    /// Plain sum of token log-probabilities.
    #[default]
    Sum,
    /// Sum divided by the number of scored tokens.
    PerToken,
}

/// Teacher-forced log-probability of `target` (excluding the implicit
/// leading `<start>`) given `source`.
pub fn score_sequence<T: Real>(model: &TransformerModel<T>, source: &[u32], target: &[u32], norm: ScoreNorm) -> Result<f64> {
    let enc = model.encode(source)?;
    score_encoded(model, &enc, target, norm)
}

/// [`score_sequence`] against an already encoded source.
pub fn score_encoded<T: Real>(model: &TransformerModel<T>, enc: &EncodedSource<T>, target: &[u32], norm: ScoreNorm) -> Result<f64> {
    let lps = model.target_logprobs(enc, target)?;
    let total: f64 = lps.iter().sum();
    Ok(match norm {
        ScoreNorm::Sum => total,
        ScoreNorm::PerToken => total / lps.len() as f64,
    })
}
