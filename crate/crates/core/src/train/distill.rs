use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::corpus::{count_separators, TrainExample, END, START};
use crate::decode::{translate_ids, DecodeParams};
use crate::error::Result;
use crate::model::TransformerModel;
use crate::subword::{bpe_reverse, TextCodec};

/// Which targets a distilled corpus keeps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixMode {
    /// Every reference followed by the teacher's translation of the same source.
    #[default]
    #[serde(rename = "reference+teacher")]
    ReferenceAndTeacher,
    #[serde(rename = "teacher_only")]
    TeacherOnly,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Teacher checkpoint, resolved by the caller.
    pub teacher_checkpoint: Option<String>,
    pub decode: DecodeParams,
    pub mix_mode: MixMode,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillFailure {
    /// Index of the source example.
    pub index: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistillOutput {
    pub examples: Vec<TrainExample>,
    pub failures: Vec<DistillFailure>,
}

/// Decodes every source with the teacher and builds the distilled corpus.
/// Teacher outputs keep their multi-segment form; an output whose separator
/// count differs from its source, or that never produced `<end>`, is
/// dropped and recorded as a failure.
pub fn distill_examples<T: Real>(
    teacher: &TransformerModel<T>,
    examples: &[TrainExample],
    codec: &TextCodec,
    config: &DistillConfig,
) -> Result<DistillOutput> {
    let mut out = DistillOutput::default();
    for (index, ex) in examples.iter().enumerate() {
        if config.mix_mode == MixMode::ReferenceAndTeacher {
            out.examples.push(ex.clone());
        }
        let ids = codec.encode(&ex.source);
        let decoded = match translate_ids(teacher, &ids, 0, codec, &config.decode) {
            Ok(t) => t,
            Err(e) => {
                out.failures.push(DistillFailure {
                    index,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if decoded.hypothesis.forced {
            out.failures.push(DistillFailure {
                index,
                reason: "no <end> within max_len".into(),
            });
            continue;
        }
        let tokens: Vec<&str> = decoded.raw.split_whitespace().filter(|t| *t != END).collect();
        let body = bpe_reverse(&tokens);
        let target = if body.is_empty() {
            format!("{START} {END}")
        } else {
            format!("{START} {body} {END}")
        };
        let seps = count_separators(&target);
        if seps != ex.context_window {
            out.failures.push(DistillFailure {
                index,
                reason: format!("teacher output has {seps} separators, source has {}", ex.context_window),
            });
            continue;
        }
        out.examples.push(TrainExample {
            source: ex.source.clone(),
            target,
            kind: ex.kind,
            context_window: ex.context_window,
        });
    }
    Ok(out)
}
