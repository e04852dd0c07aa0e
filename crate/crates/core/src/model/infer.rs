//! Graph-free incremental decoding with per-row key/value caches.

use super::transformer::{Attention, FeedForward, Norm, TransformerModel};
use crate::autodiff::kernels::{layer_norm_rows, linear, log_softmax_in_place, position_encoding, softmax_in_place};
use crate::autodiff::{cst, Graph, MatRef, Real};
use crate::error::{Error, Result};
use crate::subword::START_ID;

/// Encoder output for one source sentence plus per-layer cross-attention
/// keys and values.
#[derive(Clone, Debug)]
pub struct EncodedSource<T> {
    pub src_len: usize,
    pub memory: Vec<T>,
    cross_k: Vec<Vec<T>>,
    cross_v: Vec<Vec<T>>,
}

/// Decoder self-attention cache; each row is one hypothesis.
#[derive(Clone, Debug)]
pub struct DecoderState<T> {
    len: usize,
    /// `[layer][row]` flat `len * d_model` buffers.
    keys: Vec<Vec<Vec<T>>>,
    values: Vec<Vec<Vec<T>>>,
}

impl<T: Real> DecoderState<T> {
    pub fn rows(&self) -> usize {
        self.keys.first().map(Vec::len).unwrap_or(0)
    }

    /// Decoded positions so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Keeps rows in the order given by `parents` (duplicates allowed).
    pub fn reorder(&mut self, parents: &[usize]) {
        for layer in self.keys.iter_mut().chain(self.values.iter_mut()) {
            let old = std::mem::take(layer);
            *layer = parents.iter().map(|&p| old[p].clone()).collect();
        }
    }
}

impl<T: Real> TransformerModel<T> {
    /// Runs the encoder on one source sentence.
    pub fn encode(&self, source: &[u32]) -> Result<EncodedSource<T>> {
        if source.is_empty() {
            return Err(Error::contract("empty source"));
        }
        let vocab = self.config().vocab_size;
        if let Some(&bad) = source.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::contract(format!("token id {bad} outside vocabulary of size {vocab}")));
        }
        let ids: Vec<usize> = source.iter().map(|&i| i as usize).collect();
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let mem = self.encode_graph(&mut g, &vars, &ids, 1, ids.len(), &mut None)?;
        let memory = g.value(mem).data().to_vec();
        let d = self.config().d_model;
        let n = ids.len();
        let p = self.params();
        let mut cross_k = Vec::new();
        let mut cross_v = Vec::new();
        for layer in &self.layout.decoder {
            let a = &layer.cross_attn;
            cross_k.push(linear(&memory, n, d, p[a.wk].data(), d, Some(p[a.bk].data())));
            cross_v.push(linear(&memory, n, d, p[a.wv].data(), d, Some(p[a.bv].data())));
        }
        Ok(EncodedSource {
            src_len: n,
            memory,
            cross_k,
            cross_v,
        })
    }

    pub fn decoder_state(&self, rows: usize) -> DecoderState<T> {
        let layers = self.layout.decoder.len();
        DecoderState {
            len: 0,
            keys: vec![vec![Vec::new(); rows]; layers],
            values: vec![vec![Vec::new(); rows]; layers],
        }
    }

    fn norm_rows(&self, x: &[T], n: Norm) -> Vec<T> {
        let d = self.config().d_model;
        let mut out = vec![T::zero(); x.len()];
        let p = self.params();
        layer_norm_rows(
            x,
            d,
            p[n.gain].data(),
            p[n.bias].data(),
            cst(self.config().layer_norm_eps),
            &mut out,
            None,
            None,
        );
        out
    }

    fn project(&self, x: &[T], rows: usize, w: usize, b: usize) -> Vec<T> {
        let p = self.params();
        let din = p[w].shape()[0];
        let dout = p[w].shape()[1];
        linear(x, rows, din, p[w].data(), dout, Some(p[b].data()))
    }

    /// Attention of `q [rows*n, d]` against per-row key/value buffers. Query
    /// `i` of a row may see keys `0..limit(i)`.
    fn attend(&self, q: &[T], rows: usize, n: usize, keys: &[&[T]], values: &[&[T]], limit: impl Fn(usize) -> usize) -> Vec<T> {
        let d = self.config().d_model;
        let heads = self.config().heads;
        let dk = d / heads;
        let scale = cst::<T>(1.0 / (dk as f64).sqrt());
        let mut out = vec![T::zero(); rows * n * d];
        let mut scores = Vec::new();
        for r in 0..rows {
            let (kr, vr) = (keys[r], values[r]);
            for i in 0..n {
                let qrow = &q[(r * n + i) * d..(r * n + i + 1) * d];
                let visible = limit(i);
                for h in 0..heads {
                    let qh = &qrow[h * dk..(h + 1) * dk];
                    scores.clear();
                    for j in 0..visible {
                        let kh = &kr[j * d + h * dk..j * d + (h + 1) * dk];
                        let s: T = qh.iter().zip(kh).map(|(a, b)| *a * *b).sum();
                        scores.push(s * scale);
                    }
                    softmax_in_place(&mut scores);
                    let orow = &mut out[(r * n + i) * d + h * dk..(r * n + i) * d + (h + 1) * dk];
                    for (j, &w) in scores.iter().enumerate() {
                        let vh = &vr[j * d + h * dk..j * d + (h + 1) * dk];
                        for (o, v) in orow.iter_mut().zip(vh) {
                            *o += w * *v;
                        }
                    }
                }
            }
        }
        out
    }

    fn ff_rows(&self, x: &[T], rows: usize, f: &FeedForward) -> Vec<T> {
        let mut h = self.project(x, rows, f.w1, f.b1);
        for v in h.iter_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        self.project(&h, rows, f.w2, f.b2)
    }

    fn attn_out(&self, ctx: &[T], rows: usize, a: &Attention) -> Vec<T> {
        self.project(ctx, rows, a.wo, a.bo)
    }

    /// Feeds `n` new tokens per row (row-major `tokens[row * n + i]`) and
    /// returns logits `[rows * n, vocab]`.
    pub fn decode_step(&self, src: &EncodedSource<T>, state: &mut DecoderState<T>, tokens: &[u32], n: usize) -> Result<Vec<T>> {
        let rows = state.rows();
        if tokens.len() != rows * n || n == 0 {
            return Err(Error::contract(format!("expected {rows} x {n} tokens, got {}", tokens.len())));
        }
        let cfg = self.config();
        let (d, vocab) = (cfg.d_model, cfg.vocab_size);
        let start = state.len;
        self.check_positions(start + n)?;
        if let Some(&bad) = tokens.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::contract(format!("token id {bad} outside vocabulary of size {vocab}")));
        }
        let p = self.params();
        let emb = p[self.layout.embedding].data();
        let total = rows * n;
        let mut x = vec![T::zero(); total * d];
        let scale = cst::<T>((d as f64).sqrt());
        let mut pe = vec![T::zero(); d];
        for r in 0..rows {
            for i in 0..n {
                let id = tokens[r * n + i] as usize;
                position_encoding(start + i, d, &mut pe);
                let row = &mut x[(r * n + i) * d..(r * n + i + 1) * d];
                for j in 0..d {
                    row[j] = emb[id * d + j] * scale + pe[j];
                }
            }
        }
        for (l, layer) in self.layout.decoder.iter().enumerate() {
            let h = self.norm_rows(&x, layer.ln_self);
            let a = &layer.self_attn;
            let q = self.project(&h, total, a.wq, a.bq);
            let k = self.project(&h, total, a.wk, a.bk);
            let v = self.project(&h, total, a.wv, a.bv);
            for r in 0..rows {
                state.keys[l][r].extend_from_slice(&k[r * n * d..(r + 1) * n * d]);
                state.values[l][r].extend_from_slice(&v[r * n * d..(r + 1) * n * d]);
            }
            let ks: Vec<&[T]> = state.keys[l].iter().map(Vec::as_slice).collect();
            let vs: Vec<&[T]> = state.values[l].iter().map(Vec::as_slice).collect();
            let ctx = self.attend(&q, rows, n, &ks, &vs, |i| start + i + 1);
            let o = self.attn_out(&ctx, total, a);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += *b);

            let h = self.norm_rows(&x, layer.ln_cross);
            let a = &layer.cross_attn;
            let q = self.project(&h, total, a.wq, a.bq);
            let ks = vec![src.cross_k[l].as_slice(); rows];
            let vs = vec![src.cross_v[l].as_slice(); rows];
            let ctx = self.attend(&q, rows, n, &ks, &vs, |_| src.src_len);
            let o = self.attn_out(&ctx, total, a);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += *b);

            let h = self.norm_rows(&x, layer.ln_ff);
            let f = self.ff_rows(&h, total, &layer.ff);
            x.iter_mut().zip(&f).for_each(|(a, b)| *a += *b);
        }
        state.len += n;
        let x = self.norm_rows(&x, self.layout.dec_final);
        let mut logits = vec![T::zero(); total * vocab];
        T::gemm(
            T::one(),
            MatRef::new(&x, total, d),
            MatRef::transposed(p[self.layout.output].data(), vocab, d),
            T::zero(),
            &mut logits,
        );
        Ok(logits)
    }

    /// Per-position log-probabilities of `target` (without the leading
    /// `<start>`) under teacher forcing.
    pub fn target_logprobs(&self, src: &EncodedSource<T>, target: &[u32]) -> Result<Vec<f64>> {
        if target.is_empty() {
            return Err(Error::contract("cannot score an empty target"));
        }
        let vocab = self.config().vocab_size;
        let mut inputs = Vec::with_capacity(target.len());
        inputs.push(START_ID);
        inputs.extend_from_slice(&target[..target.len() - 1]);
        let mut state = self.decoder_state(1);
        let mut logits = self.decode_step(src, &mut state, &inputs, inputs.len())?;
        let mut out = Vec::with_capacity(target.len());
        for (row, &gold) in logits.chunks_exact_mut(vocab).zip(target) {
            if gold as usize >= vocab {
                return Err(Error::contract(format!("token id {gold} outside vocabulary of size {vocab}")));
            }
            log_softmax_in_place(row);
            out.push(row[gold as usize].to_f64().unwrap_or(f64::NAN));
        }
        Ok(out)
    }
}
