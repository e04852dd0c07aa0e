use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{length_filter, ExampleKind, TrainExample};
use crate::error::Result;
use crate::model::PaddedBatch;
use crate::subword::TextCodec;

/// A training pair as vocabulary ids, both sides `<start> ... <end>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub kind: ExampleKind,
}

impl EncodedExample {
    fn len(&self) -> usize {
        self.source.len().max(self.target.len())
    }
}

/// Rewrites both sides as space-joined subword tokens.
pub fn segment_examples(codec: &TextCodec, examples: &[TrainExample]) -> Vec<TrainExample> {
    examples
        .iter()
        .map(|e| TrainExample {
            source: codec.segment(&e.source).join(" "),
            target: codec.segment(&e.target).join(" "),
            kind: e.kind,
            context_window: e.context_window,
        })
        .collect()
}

/// Subword-segments, drops examples longer than `max_tokens` subwords on
/// either side and maps to ids.
pub fn encode_examples(codec: &TextCodec, examples: &[TrainExample], max_tokens: usize) -> Vec<EncodedExample> {
    length_filter(segment_examples(codec, examples), max_tokens)
        .into_iter()
        .map(|e| {
            let src: Vec<&str> = e.source.split_whitespace().collect();
            let tgt: Vec<&str> = e.target.split_whitespace().collect();
            EncodedExample {
                source: codec.vocab.encode(&src),
                target: codec.vocab.encode(&tgt),
                kind: e.kind,
            }
        })
        .collect()
}

/// Groups example indices into batches of at most `batch_tokens` padded
/// slots. Examples are shuffled, bucketed by length, packed, and the batch
/// order is shuffled again.
pub fn token_batches<R: Rng + ?Sized>(examples: &[EncodedExample], batch_tokens: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| examples[i].len());
    let mut batches = pack(&order, examples, batch_tokens);
    batches.shuffle(rng);
    batches
}

/// Deterministic length-sorted batches for evaluation.
pub fn sorted_batches(examples: &[EncodedExample], batch_tokens: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| examples[i].len());
    pack(&order, examples, batch_tokens)
}

fn pack(order: &[usize], examples: &[EncodedExample], batch_tokens: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for &i in order {
        let len = examples[i].len();
        let widened = longest.max(len);
        if !current.is_empty() && widened * (current.len() + 1) > batch_tokens {
            batches.push(std::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(len);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

pub fn padded_batch(examples: &[EncodedExample], indices: &[usize]) -> Result<PaddedBatch> {
    let pairs: Vec<(&[u32], &[u32])> = indices
        .iter()
        .map(|&i| (examples[i].source.as_slice(), examples[i].target.as_slice()))
        .collect();
    PaddedBatch::from_pairs(&pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ex(n: usize) -> EncodedExample {
        EncodedExample {
            source: vec![5; n],
            target: vec![5; n],
            kind: ExampleKind::Single,
        }
    }

    #[test]
    fn batches_respect_budget_and_cover_everything() {
        let examples: Vec<EncodedExample> = (1..40).map(|n| ex(n % 13 + 2)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = token_batches(&examples, 40, &mut rng);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, (0..examples.len()).collect::<Vec<_>>());
        for b in &batches {
            let longest = b.iter().map(|&i| examples[i].len()).max().unwrap();
            assert!(b.len() == 1 || longest * b.len() <= 40);
        }
        let mut again = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(batches, token_batches(&examples, 40, &mut again));
    }
}
