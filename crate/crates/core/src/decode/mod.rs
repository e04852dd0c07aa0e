//! Greedy and beam-search decoding plus extraction of the target segment
//! from multi-segment output.

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::log_softmax_in_place;
use crate::autodiff::Real;
use crate::corpus::{join_segments, END, SEP, START};
use crate::error::{Error, Result};
use crate::model::{DecoderState, EncodedSource, TransformerModel};
use crate::subword::{bpe_reverse, TextCodec, END_ID, PAD_ID, START_ID, UNK_ID};

/// Token-by-token conditional distribution that a decoder can query.
pub trait StepScorer {
    type State;

    fn vocab_size(&self) -> usize;

    /// State holding a single empty prefix.
    fn initial_state(&self) -> Result<Self::State>;

    /// Feeds one token per row and returns row-major log-probabilities
    /// `[rows * vocab]` of the next token.
    fn step(&self, state: &mut Self::State, last: &[u32]) -> Result<Vec<f64>>;

    /// Keeps rows in the order of `parents`; duplicates allowed.
    fn reorder(&self, state: &mut Self::State, parents: &[usize]);

    /// Longest prefix the scorer can condition on, if bounded.
    fn max_steps(&self) -> Option<usize> {
        None
    }
}

fn step_limit<S: StepScorer>(scorer: &S, max_len: usize) -> usize {
    scorer.max_steps().map_or(max_len, |m| m.min(max_len))
}

/// A transformer conditioned on one encoded source.
pub struct ModelScorer<'m, T: Real> {
    model: &'m TransformerModel<T>,
    source: EncodedSource<T>,
}

impl<'m, T: Real> ModelScorer<'m, T> {
    pub fn new(model: &'m TransformerModel<T>, source_ids: &[u32]) -> Result<Self> {
        Ok(ModelScorer {
            model,
            source: model.encode(source_ids)?,
        })
    }
}

impl<T: Real> StepScorer for ModelScorer<'_, T> {
    type State = DecoderState<T>;

    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn initial_state(&self) -> Result<DecoderState<T>> {
        Ok(self.model.decoder_state(1))
    }

    fn step(&self, state: &mut DecoderState<T>, last: &[u32]) -> Result<Vec<f64>> {
        let mut logits = self.model.decode_step(&self.source, state, last, 1)?;
        let vocab = self.vocab_size();
        for row in logits.chunks_exact_mut(vocab) {
            log_softmax_in_place(row);
        }
        Ok(logits.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
    }

    fn reorder(&self, state: &mut DecoderState<T>, parents: &[usize]) {
        state.reorder(parents);
    }

    fn max_steps(&self) -> Option<usize> {
        Some(self.model.config().max_positions)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeParams {
    pub beam_size: usize,
    /// Maximum number of generated tokens, `<end>` included.
    pub max_len: usize,
    pub length_penalty: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            beam_size: 5,
            max_len: 100,
            length_penalty: 1.0,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::contract("beam_size must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(Error::contract("max_len must be at least 1"));
        }
        if !(self.length_penalty >= 0.0) {
            return Err(Error::contract(format!("length_penalty {} must be >= 0", self.length_penalty)));
        }
        Ok(())
    }

    /// Ranking score of a hypothesis with `logprob` over `len` tokens.
    pub fn score(&self, logprob: f64, len: usize) -> f64 {
        if self.length_penalty > 0.0 && len > 0 {
            logprob / (len as f64).powf(self.length_penalty)
        } else {
            logprob
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids without the leading `<start>`; ends in `<end>` unless forced.
    pub token_ids: Vec<u32>,
    pub logprob: f64,
    pub score: f64,
    pub finished: bool,
    /// Cut off at `max_len` without producing `<end>`.
    pub forced: bool,
}

/// Ids never generated.
fn is_banned(id: u32) -> bool {
    matches!(id, PAD_ID | UNK_ID | START_ID)
}

fn best_token(row: &[f64]) -> (u32, f64) {
    let mut best = (u32::MAX, f64::NEG_INFINITY);
    for (id, &lp) in row.iter().enumerate() {
        let id = id as u32;
        if !is_banned(id) && (lp > best.1 || best.0 == u32::MAX) {
            best = (id, lp);
        }
    }
    best
}

/// Picks the most probable token at every step (lowest id on ties).
pub fn greedy<S: StepScorer>(scorer: &S, max_len: usize, length_penalty: f64) -> Result<Hypothesis> {
    let mut state = scorer.initial_state()?;
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    let mut last = START_ID;
    let limit = step_limit(scorer, max_len);
    while tokens.len() < limit {
        let row = scorer.step(&mut state, &[last])?;
        let (id, lp) = best_token(&row);
        tokens.push(id);
        logprob += lp;
        last = id;
        if id == END_ID {
            break;
        }
    }
    let finished = tokens.last() == Some(&END_ID);
    let params = DecodeParams {
        beam_size: 1,
        max_len,
        length_penalty,
    };
    Ok(Hypothesis {
        score: params.score(logprob, tokens.len()),
        token_ids: tokens,
        logprob,
        finished: true,
        forced: !finished,
    })
}

struct Beam {
    tokens: Vec<u32>,
    logprob: f64,
}

/// Beam search returning at most `beam_size` hypotheses, best first.
/// The length limit is `max_len` or the scorer's own bound, whichever is smaller.
///
/// Every step expands all live beams and keeps the `beam_size` candidates
/// with the highest cumulative log-probability; candidates ending in
/// `<end>` leave the beam. Live beams at `max_len` are force-finished.
pub fn beam_search<S: StepScorer>(scorer: &S, params: &DecodeParams) -> Result<Vec<Hypothesis>> {
    params.validate()?;
    let vocab = scorer.vocab_size();
    let mut state = scorer.initial_state()?;
    let mut live = vec![Beam {
        tokens: Vec::new(),
        logprob: 0.0,
    }];
    let mut last = vec![START_ID];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..step_limit(scorer, params.max_len) {
        let lps = scorer.step(&mut state, &last)?;
        if lps.len() != live.len() * vocab {
            return Err(Error::State(format!(
                "scorer returned {} values for {} rows of {vocab}",
                lps.len(),
                live.len()
            )));
        }
        // (cumulative logprob, parent, token)
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * vocab);
        for (b, beam) in live.iter().enumerate() {
            for (id, &lp) in lps[b * vocab..(b + 1) * vocab].iter().enumerate() {
                if !is_banned(id as u32) && lp.is_finite() {
                    cands.push((beam.logprob + lp, b, id as u32));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(params.beam_size);

        let mut next = Vec::new();
        let mut parents = Vec::new();
        for (lp, parent, id) in cands {
            let mut tokens = live[parent].tokens.clone();
            tokens.push(id);
            if id == END_ID {
                done.push(Hypothesis {
                    score: params.score(lp, tokens.len()),
                    token_ids: tokens,
                    logprob: lp,
                    finished: true,
                    forced: false,
                });
            } else {
                next.push(Beam { tokens, logprob: lp });
                parents.push(parent);
            }
        }
        if next.is_empty() {
            live.clear();
            break;
        }
        scorer.reorder(&mut state, &parents);
        last = next.iter().map(|b| *b.tokens.last().expect("non-empty beam")).collect();
        live = next;
    }
    for beam in live {
        done.push(Hypothesis {
            score: params.score(beam.logprob, beam.tokens.len()),
            token_ids: beam.tokens,
            logprob: beam.logprob,
            finished: true,
            forced: true,
        });
    }
    done.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.token_ids.cmp(&b.token_ids)));
    done.truncate(params.beam_size);
    Ok(done)
}

/// The target segment of a decoded output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Extracted {
    pub text: String,
    /// Fewer separators than expected; `text` is the whole output.
    pub used_fallback: bool,
}

/// Drops `<start>`/`<end>` and returns what follows the `k`-th `<sep>`.
pub fn extract_target(output: &str, k: usize) -> Extracted {
    let mut toks: Vec<&str> = Vec::new();
    for t in output.split_whitespace() {
        match t {
            START => {}
            END => break,
            _ => toks.push(t),
        }
    }
    if k == 0 {
        return Extracted {
            text: toks.join(" "),
            used_fallback: false,
        };
    }
    let sep_positions: Vec<usize> = toks.iter().enumerate().filter(|(_, t)| **t == SEP).map(|(i, _)| i).collect();
    match sep_positions.get(k - 1) {
        Some(&pos) => Extracted {
            text: toks[pos + 1..].join(" "),
            used_fallback: false,
        },
        None => Extracted {
            text: toks.join(" "),
            used_fallback: true,
        },
    }
}

/// One decoded and extracted translation.
#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    /// Extracted target segment with subwords joined.
    pub text: String,
    /// Full decoded token string, delimiters and subword marks included.
    pub raw: String,
    pub used_fallback: bool,
    pub hypothesis: Hypothesis,
}

/// Source ids of `<start> ctx_1 <sep> ... <sep> src <end>`.
pub fn context_input(codec: &TextCodec, src: &str, ctx: &[String]) -> Vec<u32> {
    let mut segments: Vec<&str> = ctx.iter().map(String::as_str).collect();
    segments.push(src);
    codec.encode(&join_segments(&segments))
}

/// Decodes an already encoded input and extracts the segment after the
/// `k`-th separator.
pub fn translate_ids<T: Real>(
    model: &TransformerModel<T>,
    source_ids: &[u32],
    k: usize,
    codec: &TextCodec,
    params: &DecodeParams,
) -> Result<Translation> {
    let scorer = ModelScorer::new(model, source_ids)?;
    let hyp = if params.beam_size == 1 {
        greedy(&scorer, params.max_len, params.length_penalty)?
    } else {
        beam_search(&scorer, params)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::State("beam search produced no hypothesis".into()))?
    };
    let tokens = codec.vocab.decode(&hyp.token_ids);
    let raw = tokens.join(" ");
    let extracted = extract_target(&raw, k);
    let pieces: Vec<&str> = extracted.text.split_whitespace().collect();
    Ok(Translation {
        text: bpe_reverse(&pieces),
        raw,
        used_fallback: extracted.used_fallback,
        hypothesis: hyp,
    })
}

/// Translates `src` given preceding source segments `ctx` (possibly none).
pub fn translate_with_context<T: Real>(
    model: &TransformerModel<T>,
    src: &str,
    ctx: &[String],
    codec: &TextCodec,
    params: &DecodeParams,
) -> Result<Translation> {
    translate_ids(model, &context_input(codec, src, ctx), ctx.len(), codec, params)
}

/// Translations of many inputs plus the number of extraction fallbacks.
pub fn translate_all<T: Real>(
    model: &TransformerModel<T>,
    inputs: &[(String, Vec<String>)],
    codec: &TextCodec,
    params: &DecodeParams,
) -> Result<(Vec<Translation>, usize)> {
    let mut out = Vec::with_capacity(inputs.len());
    let mut fallbacks = 0;
    for (src, ctx) in inputs {
        let t = translate_with_context(model, src, ctx, codec, params)?;
        fallbacks += usize::from(t.used_fallback);
        out.push(t);
    }
    Ok((out, fallbacks))
}
