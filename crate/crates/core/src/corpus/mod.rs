//! Document-parallel corpora and the multi-segment data transformation.
//!
//! A multi-segment example concatenates `k + 1` consecutive segments of one
//! document on both sides, joined with [`SEP`] and wrapped in [`START`] /
//! [`END`]. Single-segment examples use the same wrapping without separators,
//! so extracting the last segment works identically for both kinds.

mod contrastive;
mod io;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use contrastive::{load_contrastive, parse_contrastive, write_contrastive, ContrastiveExample};
pub use io::{
    load_documents, parse_blankline, parse_tsv, read_examples, write_documents, write_examples, CorpusFormat,
};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const START: &str = "<start>";
pub const SEP: &str = "<sep>";
pub const END: &str = "<end>";

/// Reserved delimiter and bookkeeping tokens. They never take part in BPE
/// merges and occupy fixed low ids in every vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialTokens {
    pub pad: &'static str,
    pub unk: &'static str,
    pub start: &'static str,
    pub sep: &'static str,
    pub end: &'static str,
}

impl SpecialTokens {
    pub const DEFAULT: SpecialTokens = SpecialTokens {
        pad: PAD,
        unk: UNK,
        start: START,
        sep: SEP,
        end: END,
    };

    /// In id order: pad=0, unk=1, start=2, sep=3, end=4.
    pub const fn ordered(&self) -> [&'static str; 5] {
        [self.pad, self.unk, self.start, self.sep, self.end]
    }

    pub fn contains(token: &str) -> bool {
        matches!(token, PAD | UNK | START | SEP | END)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPair {
    pub source: String,
    pub target: String,
}

impl SegmentPair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        SegmentPair {
            source: source.into(),
            target: target.into(),
        }
    }
}

/// Aligned source/target segments of one document, in document order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelDocument {
    pub doc_id: String,
    pub segments: Vec<SegmentPair>,
}

impl ParallelDocument {
    pub fn new(doc_id: impl Into<String>, segments: Vec<SegmentPair>) -> Result<Self> {
        let doc_id = doc_id.into();
        if segments.is_empty() {
            return Err(Error::contract(format!("document {doc_id} has no segments")));
        }
        Ok(ParallelDocument { doc_id, segments })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExampleKind {
    Single,
    Multi,
}

/// One training pair in delimited text form.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub source: String,
    pub target: String,
    pub kind: ExampleKind,
    pub context_window: usize,
}

/// Number of whitespace-separated [`SEP`] tokens in `text`.
pub fn count_separators(text: &str) -> usize {
    text.split_whitespace().filter(|t| *t == SEP).count()
}

/// Wraps segments as `<start> s1 <sep> s2 ... <end>`.
pub fn join_segments<S: AsRef<str>>(segments: &[S]) -> String {
    let mut out = String::from(START);
    for (i, s) in segments.iter().enumerate() {
        if i > 0 {
            out.push(' ');
            out.push_str(SEP);
        }
        out.push(' ');
        out.push_str(s.as_ref());
    }
    out.push(' ');
    out.push_str(END);
    out
}

impl TrainExample {
    /// Builds an example from delimited text, inferring the kind from the
    /// separator count, which must agree across both sides.
    pub fn from_pair(source: impl Into<String>, target: impl Into<String>) -> Result<Self> {
        let (source, target) = (source.into(), target.into());
        let (ks, kt) = (count_separators(&source), count_separators(&target));
        if ks != kt {
            return Err(Error::contract(format!(
                "source has {ks} separators but target has {kt}"
            )));
        }
        Ok(TrainExample {
            kind: if ks == 0 { ExampleKind::Single } else { ExampleKind::Multi },
            context_window: ks,
            source,
            target,
        })
    }

    pub fn single(source: &str, target: &str) -> Self {
        TrainExample {
            source: join_segments(&[source]),
            target: join_segments(&[target]),
            kind: ExampleKind::Single,
            context_window: 0,
        }
    }

    /// True when the separator layout matches `kind` and `context_window`.
    pub fn is_well_formed(&self) -> bool {
        let (ks, kt) = (count_separators(&self.source), count_separators(&self.target));
        match self.kind {
            ExampleKind::Single => ks == 0 && kt == 0,
            ExampleKind::Multi => ks == self.context_window && kt == self.context_window && ks > 0,
        }
    }

    pub fn source_tokens(&self) -> usize {
        self.source.split_whitespace().count()
    }

    pub fn target_tokens(&self) -> usize {
        self.target.split_whitespace().count()
    }
}

/// Emits every segment as a single example, then for every window of `k + 1`
/// consecutive segments inside a document one multi example. Windows never
/// cross document boundaries; documents shorter than `k + 1` contribute
/// singles only.
pub fn transform_multisegment(corpus: &[ParallelDocument], k: usize) -> Result<Vec<TrainExample>> {
    if k == 0 {
        return Err(Error::contract("context window must be at least 1"));
    }
    let mut out = singles(corpus);
    for doc in corpus {
        for window in doc.segments.windows(k + 1) {
            let src: Vec<&str> = window.iter().map(|p| p.source.as_str()).collect();
            let tgt: Vec<&str> = window.iter().map(|p| p.target.as_str()).collect();
            out.push(TrainExample {
                source: join_segments(&src),
                target: join_segments(&tgt),
                kind: ExampleKind::Multi,
                context_window: k,
            });
        }
    }
    Ok(out)
}

/// Single-segment examples only, in document order.
pub fn singles(corpus: &[ParallelDocument]) -> Vec<TrainExample> {
    corpus
        .iter()
        .flat_map(|d| d.segments.iter())
        .map(|p| TrainExample::single(&p.source, &p.target))
        .collect()
}

pub const DEFAULT_MAX_TOKENS: usize = 95;

/// Drops examples whose source or target exceeds `max_tokens` whitespace
/// tokens (delimiters included). Apply after subword segmentation.
pub fn length_filter(examples: Vec<TrainExample>, max_tokens: usize) -> Vec<TrainExample> {
    examples
        .into_iter()
        .filter(|e| e.source_tokens() <= max_tokens && e.target_tokens() <= max_tokens)
        .collect()
}

/// How the development set mirrors the training regime.
#[derive(Clone, Debug, PartialEq)]
pub enum DevMode {
    /// Singles only.
    Baseline,
    /// Singles plus multi examples with the given window.
    Contextual { context_window: usize },
    /// Each base example is emitted twice: with its reference and with the
    /// teacher's output (aligned to the base examples). The base set uses
    /// `context_window` (0 means singles only).
    Distilled {
        teacher_outputs: Option<Vec<String>>,
        context_window: usize,
    },
}

pub fn mirror_dev(dev: &[ParallelDocument], mode: &DevMode) -> Result<Vec<TrainExample>> {
    match mode {
        DevMode::Baseline => Ok(singles(dev)),
        DevMode::Contextual { context_window } => transform_multisegment(dev, *context_window),
        DevMode::Distilled {
            teacher_outputs,
            context_window,
        } => {
            let Some(teacher) = teacher_outputs else {
                return Err(Error::contract("distilled dev mode requires teacher outputs"));
            };
            let base = if *context_window == 0 {
                singles(dev)
            } else {
                transform_multisegment(dev, *context_window)?
            };
            if teacher.len() != base.len() {
                return Err(Error::contract(format!(
                    "{} teacher outputs for {} dev examples",
                    teacher.len(),
                    base.len()
                )));
            }
            let mut out = Vec::with_capacity(base.len() * 2);
            for (ex, hyp) in base.into_iter().zip(teacher) {
                let distilled = TrainExample {
                    source: ex.source.clone(),
                    target: hyp.clone(),
                    kind: ex.kind,
                    context_window: ex.context_window,
                };
                out.push(ex);
                out.push(distilled);
            }
            Ok(out)
        }
    }
}

/// Seeded global shuffle of singles and multis together.
pub fn shuffle_examples(examples: &mut [TrainExample], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    examples.shuffle(&mut rng);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, n: usize) -> ParallelDocument {
        let segs = (0..n).map(|i| SegmentPair::new(format!("s{i}"), format!("t{i}"))).collect();
        ParallelDocument::new(id, segs).unwrap()
    }

    #[test]
    fn three_segments_window_one() {
        let out = transform_multisegment(&[doc("d", 3)], 1).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(out.iter().filter(|e| e.kind == ExampleKind::Single).count(), 3);
        assert_eq!(out[3].source, "<start> s0 <sep> s1 <end>");
        assert_eq!(out[4].target, "<start> t1 <sep> t2 <end>");
    }

    #[test]
    fn one_segment_has_no_pairs() {
        let out = transform_multisegment(&[doc("d", 1)], 1).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].kind, ExampleKind::Single);
    }

    #[test]
    fn window_larger_than_document() {
        let out = transform_multisegment(&[doc("d", 3)], 3).unwrap();
        assert_eq!(out.len(), 3);
        assert!(transform_multisegment(&[], 2).unwrap().is_empty());
        assert!(transform_multisegment(&[doc("d", 3)], 0).is_err());
    }

    #[test]
    fn table_one_layout() {
        let d = ParallelDocument::new(
            "anaphora",
            vec![
                SegmentPair::new("Fire?", "Ein Feuer?"),
                SegmentPair::new("Well, put it out, why don't you?", "Na dann löscht er doch!"),
            ],
        )
        .unwrap();
        let out = transform_multisegment(&[d], 1).unwrap();
        assert_eq!(out[1].source, "<start> Well, put it out, why don't you? <end>");
        assert_eq!(out[1].target, "<start> Na dann löscht er doch! <end>");
        assert_eq!(out[2].source, "<start> Fire? <sep> Well, put it out, why don't you? <end>");
        assert_eq!(out[2].target, "<start> Ein Feuer? <sep> Na dann löscht er doch! <end>");
    }

    #[test]
    fn length_filter_cap() {
        let long = (0..94).map(|_| "w").collect::<Vec<_>>().join(" ");
        // 94 words + <start> + <end> = 96 tokens.
        let ex = TrainExample::single(&long, "x");
        assert_eq!(ex.source_tokens(), 96);
        assert!(length_filter(vec![ex.clone()], DEFAULT_MAX_TOKENS).is_empty());
        assert_eq!(length_filter(vec![ex], 96).len(), 1);
        assert!(length_filter(vec![], 95).is_empty());
    }

    #[test]
    fn mirror_dev_modes() {
        let dev = vec![doc("a", 2), doc("b", 2)];
        let ctx = mirror_dev(&dev, &DevMode::Contextual { context_window: 1 }).unwrap();
        assert_eq!(ctx.iter().filter(|e| e.kind == ExampleKind::Single).count(), 4);
        assert_eq!(ctx.iter().filter(|e| e.kind == ExampleKind::Multi).count(), 2);
        assert_eq!(mirror_dev(&dev, &DevMode::Baseline).unwrap().len(), 4);

        let teacher: Vec<String> = (0..4).map(|i| format!("<start> h{i} <end>")).collect();
        let distilled = mirror_dev(
            &dev,
            &DevMode::Distilled {
                teacher_outputs: Some(teacher),
                context_window: 0,
            },
        )
        .unwrap();
        assert_eq!(distilled.len(), 8);
        assert_eq!(distilled[1].target, "<start> h0 <end>");
        assert_eq!(distilled[0].target, "<start> t0 <end>");

        let missing = mirror_dev(
            &dev,
            &DevMode::Distilled {
                teacher_outputs: None,
                context_window: 0,
            },
        );
        assert!(matches!(missing, Err(Error::Contract(_))));
    }

    #[test]
    fn from_pair_infers_kind() {
        let ex = TrainExample::from_pair("<start> a <sep> b <end>", "<start> x <sep> y <end>").unwrap();
        assert_eq!(ex.kind, ExampleKind::Multi);
        assert_eq!(ex.context_window, 1);
        assert!(ex.is_well_formed());
        assert!(TrainExample::from_pair("<start> a <sep> b <end>", "<start> x <end>").is_err());
    }

    #[test]
    fn shuffle_is_seeded() {
        let base = transform_multisegment(&[doc("a", 6), doc("b", 4)], 1).unwrap();
        let (mut x, mut y) = (base.clone(), base.clone());
        shuffle_examples(&mut x, 7);
        shuffle_examples(&mut y, 7);
        assert_eq!(x, y);
        assert_ne!(x, base);
    }
}
