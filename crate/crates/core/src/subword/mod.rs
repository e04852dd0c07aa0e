//! Byte-pair-encoding subwords, pretokenization and the shared vocabulary.

mod bpe;
mod vocab;

use std::path::Path;

pub use bpe::{bpe_reverse, BpeModel, CONTINUATION, END_OF_WORD};
pub use vocab::{Vocabulary, END_ID, PAD_ID, SEP_ID, START_ID, UNK_ID};

use crate::corpus::SpecialTokens;
use crate::error::Result;

/// Desk-scale default merge count.
pub const DEFAULT_MERGES: usize = 1000;

/// Whitespace plus punctuation splitting: every non-alphanumeric character
/// becomes its own token. Reserved tokens are kept whole.
pub fn pretokenize(text: &str) -> String {
    let mut out: Vec<String> = Vec::new();
    for word in text.split_whitespace() {
        if SpecialTokens::contains(word) {
            out.push(word.to_string());
            continue;
        }
        let mut cur = String::new();
        for c in word.chars() {
            if c.is_alphanumeric() {
                cur.push(c);
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out.join(" ")
}

/// Raw text <-> token ids: pretokenization, BPE and vocabulary lookup.
#[derive(Clone, Debug)]
pub struct TextCodec {
    pub bpe: BpeModel,
    pub vocab: Vocabulary,
}

impl TextCodec {
    pub fn new(bpe: BpeModel, vocab: Vocabulary) -> Self {
        TextCodec { bpe, vocab }
    }

    /// Trains BPE on the pretokenized lines and builds the vocabulary from
    /// their segmentation, so no training token maps to `<unk>`.
    pub fn train<S: AsRef<str>>(lines: &[S], num_merges: usize) -> Self {
        let pre: Vec<String> = lines.iter().map(|l| pretokenize(l.as_ref())).collect();
        let bpe = BpeModel::train(&pre, num_merges);
        let segmented: Vec<Vec<String>> = pre.iter().map(|l| bpe.apply(l)).collect();
        let vocab = Vocabulary::build(segmented.iter().flatten().map(String::as_str));
        TextCodec { bpe, vocab }
    }

    pub fn load(merges: &Path, vocab: &Path) -> Result<Self> {
        Ok(TextCodec {
            bpe: BpeModel::load(merges)?,
            vocab: Vocabulary::load(vocab)?,
        })
    }

    pub fn save(&self, merges: &Path, vocab: &Path) -> Result<()> {
        self.bpe.save(merges)?;
        self.vocab.save(vocab)
    }

    /// Subword tokens of raw text.
    pub fn segment(&self, text: &str) -> Vec<String> {
        self.bpe.apply(&pretokenize(text))
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.vocab.encode(&self.segment(text))
    }

    /// Ids back to (pretokenized) text with subwords joined.
    pub fn decode(&self, ids: &[u32]) -> String {
        bpe_reverse(&self.vocab.decode(ids))
    }
}
