//! Toolkit for multi-segment (context-aware) machine translation experiments.
//!
//! Documents are turned into single-segment and concatenated multi-segment
//! training examples, small transformer encoder-decoders are trained on them
//! with a self-contained autodiff core, and the resulting models are decoded,
//! distilled and evaluated with BLEU, ChrF, contrastive accuracy, length-binned
//! BLEU and context-sensitivity measures.

pub mod autodiff;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod subword;
pub mod synthetic;
pub mod train;

pub use corpus::{ContrastiveExample, ParallelDocument, SegmentPair, TrainExample};
pub use decode::{DecodeParams, Translation};
pub use error::{Error, Result};
pub use eval::{ContrastiveReport, EvalReport};
pub use experiment::{RunConfig, SuiteReport, SystemReport};
pub use model::{ModelConfig, TransformerModel};
pub use subword::TextCodec;
pub use train::{StopReason, TrainParams};
