use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::autodiff::kernels::position_encoding;
use crate::autodiff::{cst, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::subword::PAD_ID;

/// Additive mask value for disallowed attention positions.
const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attention {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FeedForward {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncoderLayer {
    pub ln_attn: Norm,
    pub attn: Attention,
    pub ln_ff: Norm,
    pub ff: FeedForward,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecoderLayer {
    pub ln_self: Norm,
    pub self_attn: Attention,
    pub ln_cross: Norm,
    pub cross_attn: Attention,
    pub ln_ff: Norm,
    pub ff: FeedForward,
}

/// Indices of every parameter group inside the flat parameter list.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub embedding: usize,
    pub output: usize,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub enc_final: Norm,
    pub dec_final: Norm,
}

enum Init {
    Xavier,
    Zeros,
    Ones,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Attention {
        let mut lin = |n: &str| {
            (
                self.add(format!("{prefix}.{n}.weight"), vec![d, d], Init::Xavier),
                self.add(format!("{prefix}.{n}.bias"), vec![d], Init::Zeros),
            )
        };
        let (wq, bq) = lin("q");
        let (wk, bk) = lin("k");
        let (wv, bv) = lin("v");
        let (wo, bo) = lin("o");
        Attention {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn feed_forward(&mut self, prefix: &str, d: usize, ff: usize) -> FeedForward {
        FeedForward {
            w1: self.add(format!("{prefix}.w1"), vec![d, ff], Init::Xavier),
            b1: self.add(format!("{prefix}.b1"), vec![ff], Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), vec![ff, d], Init::Xavier),
            b2: self.add(format!("{prefix}.b2"), vec![d], Init::Zeros),
        }
    }
}

fn build_layout(config: &ModelConfig) -> (Layout, Builder) {
    let d = config.d_model;
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let embedding = b.add("embedding".into(), vec![config.vocab_size, d], Init::Xavier);
    let output = if config.tie_embeddings {
        embedding
    } else {
        b.add("output".into(), vec![config.vocab_size, d], Init::Xavier)
    };
    let encoder = (0..config.enc_layers)
        .map(|l| EncoderLayer {
            ln_attn: b.norm(&format!("enc.{l}.ln_attn"), d),
            attn: b.attention(&format!("enc.{l}.attn"), d),
            ln_ff: b.norm(&format!("enc.{l}.ln_ff"), d),
            ff: b.feed_forward(&format!("enc.{l}.ff"), d, config.ff_width),
        })
        .collect();
    let decoder = (0..config.dec_layers)
        .map(|l| DecoderLayer {
            ln_self: b.norm(&format!("dec.{l}.ln_self"), d),
            self_attn: b.attention(&format!("dec.{l}.self_attn"), d),
            ln_cross: b.norm(&format!("dec.{l}.ln_cross"), d),
            cross_attn: b.attention(&format!("dec.{l}.cross_attn"), d),
            ln_ff: b.norm(&format!("dec.{l}.ln_ff"), d),
            ff: b.feed_forward(&format!("dec.{l}.ff"), d, config.ff_width),
        })
        .collect();
    let enc_final = b.norm("enc.final", d);
    let dec_final = b.norm("dec.final", d);
    (
        Layout {
            embedding,
            output,
            encoder,
            decoder,
            enc_final,
            dec_final,
        },
        b,
    )
}

/// Pre-norm transformer encoder-decoder with sinusoidal positions.
#[derive(Clone, Debug)]
pub struct TransformerModel<T: Real> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
    pub(crate) layout: Layout,
}

/// Padded id batch. Targets are the decoder inputs shifted by one.
#[derive(Clone, Debug)]
pub struct PaddedBatch {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<usize>,
    pub tgt_in: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl PaddedBatch {
    /// Builds a batch from `(source, target)` id pairs. Each target must start
    /// with `<start>`; the decoder reads `target[..n-1]` and predicts `target[1..]`.
    pub fn from_pairs(pairs: &[(&[u32], &[u32])]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let src_len = pairs.iter().map(|p| p.0.len()).max().unwrap_or(0);
        let tgt_len = pairs.iter().map(|p| p.1.len().saturating_sub(1)).max().unwrap_or(0);
        if src_len == 0 || tgt_len == 0 {
            return Err(Error::contract("batch has an empty source or a target shorter than 2 tokens"));
        }
        let n = pairs.len();
        let mut src = vec![PAD_ID as usize; n * src_len];
        let mut tgt_in = vec![PAD_ID as usize; n * tgt_len];
        let mut targets = vec![None; n * tgt_len];
        for (b, (s, t)) in pairs.iter().enumerate() {
            if s.is_empty() || t.len() < 2 {
                return Err(Error::contract(format!("pair {b} has an empty side")));
            }
            for (i, &id) in s.iter().enumerate() {
                src[b * src_len + i] = id as usize;
            }
            for i in 0..t.len() - 1 {
                tgt_in[b * tgt_len + i] = t[i] as usize;
                targets[b * tgt_len + i] = Some(t[i + 1] as usize);
            }
        }
        Ok(PaddedBatch {
            batch: n,
            src_len,
            tgt_len,
            src,
            tgt_in,
            targets,
        })
    }

    /// Padded token slots on the larger side, the unit of token batching.
    pub fn padded_tokens(&self) -> usize {
        self.batch * self.src_len.max(self.tgt_len)
    }

    pub fn target_tokens(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Optional dropout randomness for a training forward pass.
pub struct DropoutCtx<'r> {
    pub rng: &'r mut ChaCha8Rng,
}

impl<T: Real> TransformerModel<T> {
    /// Xavier-uniform initialization (average fan) seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = builder
            .shapes
            .iter()
            .zip(&builder.inits)
            .map(|(shape, init)| match init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, T::one()),
                Init::Xavier => {
                    let avg_fan = (shape[0] + shape[1]) as f64 / 2.0;
                    let a = (config.init_scale / avg_fan).sqrt();
                    let data = (0..shape[0] * shape[1])
                        .map(|_| T::from_f64_lossy(rng.random_range(-a..a)))
                        .collect();
                    Tensor::new(shape.clone(), data).expect("shape matches")
                }
            })
            .collect();
        Ok(Self::assemble(config, layout, builder.names, params))
    }

    fn assemble(config: ModelConfig, layout: Layout, names: Vec<String>, params: Vec<Tensor<T>>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        TransformerModel {
            config,
            names,
            params,
            index,
            layout,
        }
    }

    /// Rebuilds a model from named tensors; every expected name must be present
    /// with the expected shape.
    pub fn from_named(config: ModelConfig, mut named: HashMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = build_layout(&config);
        let mut params = Vec::with_capacity(builder.names.len());
        for (name, shape) in builder.names.iter().zip(&builder.shapes) {
            let t = named
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            params.push(t);
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Format(format!("unexpected parameter {extra}")));
        }
        Ok(Self::assemble(config, layout, builder.names, params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Scalars actually allocated.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// True when the output projection is the embedding matrix itself.
    pub fn output_is_embedding(&self) -> bool {
        self.layout.output == self.layout.embedding
    }

    pub fn cast<U: Real>(&self) -> TransformerModel<U> {
        TransformerModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
            layout: self.layout.clone(),
        }
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p)).collect()
    }

    /// Records every parameter as a constant.
    pub fn bind_frozen<'a>(&'a self, g: &mut Graph<'a, T>) -> Vec<Var> {
        self.params.iter().map(|p| g.constant_ref(p)).collect()
    }

    pub(crate) fn check_positions(&self, len: usize) -> Result<()> {
        if len > self.config.max_positions {
            return Err(Error::contract(format!(
                "sequence length {len} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        Ok(())
    }

    fn embed<'a>(&self, g: &mut Graph<'a, T>, vars: &[Var], ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        let d = self.config.d_model;
        let emb = g.embedding(vars[self.layout.embedding], ids)?;
        let emb = g.scale(emb, cst::<T>((d as f64).sqrt()));
        let mut pe = Tensor::<T>::zeros(&[batch * len, d]);
        for b in 0..batch {
            for t in 0..len {
                position_encoding(t, d, &mut pe.data_mut()[(b * len + t) * d..(b * len + t + 1) * d]);
            }
        }
        let pe = g.constant(pe);
        g.add(emb, pe)
    }

    fn linear<'a>(g: &mut Graph<'a, T>, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    fn norm<'a>(&self, g: &mut Graph<'a, T>, vars: &[Var], x: Var, n: Norm) -> Result<Var> {
        g.layer_norm(x, vars[n.gain], vars[n.bias], self.config.layer_norm_eps)
    }

    fn dropout<'a>(g: &mut Graph<'a, T>, x: Var, p: f64, drop: &mut Option<DropoutCtx<'_>>) -> Var {
        match drop {
            Some(ctx) if p > 0.0 => g.dropout(x, p, ctx.rng),
            _ => x,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<'a>(
        &self,
        g: &mut Graph<'a, T>,
        vars: &[Var],
        a: &Attention,
        xq: Var,
        xkv: Var,
        mask: &Tensor<T>,
        batch: usize,
        q_len: usize,
        k_len: usize,
        drop: &mut Option<DropoutCtx<'_>>,
    ) -> Result<Var> {
        let heads = self.config.heads;
        let q = Self::linear(g, xq, vars[a.wq], vars[a.bq])?;
        let k = Self::linear(g, xkv, vars[a.wk], vars[a.bk])?;
        let v = Self::linear(g, xkv, vars[a.wv], vars[a.bv])?;
        let q = g.split_heads(q, batch, q_len, heads)?;
        let k = g.split_heads(k, batch, k_len, heads)?;
        let v = g.split_heads(v, batch, k_len, heads)?;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, cst::<T>(1.0 / (self.config.head_dim() as f64).sqrt()));
        let scores = g.add_mask(scores, mask, heads)?;
        let weights = g.softmax(scores, 2)?;
        let weights = Self::dropout(g, weights, self.config.dropout_attn, drop);
        let ctx = g.batch_matmul(weights, v, false)?;
        let ctx = g.merge_heads(ctx, batch, q_len, heads)?;
        Self::linear(g, ctx, vars[a.wo], vars[a.bo])
    }

    fn feed_forward<'a>(
        &self,
        g: &mut Graph<'a, T>,
        vars: &[Var],
        f: &FeedForward,
        x: Var,
        drop: &mut Option<DropoutCtx<'_>>,
    ) -> Result<Var> {
        let h = Self::linear(g, x, vars[f.w1], vars[f.b1])?;
        let h = g.relu(h);
        let h = Self::dropout(g, h, self.config.dropout_act, drop);
        Self::linear(g, h, vars[f.w2], vars[f.b2])
    }

    fn residual<'a>(&self, g: &mut Graph<'a, T>, x: Var, branch: Var, drop: &mut Option<DropoutCtx<'_>>) -> Result<Var> {
        let branch = Self::dropout(g, branch, self.config.dropout_prepost, drop);
        g.add(x, branch)
    }

    /// Key-padding mask `[batch, q_len, k_len]` from padded key ids, optionally causal.
    fn build_mask(keys: &[usize], batch: usize, q_len: usize, k_len: usize, causal: bool) -> Tensor<T> {
        let mut m = Tensor::<T>::zeros(&[batch, q_len, k_len]);
        let masked = cst::<T>(MASKED);
        let data = m.data_mut();
        for b in 0..batch {
            for i in 0..q_len {
                for j in 0..k_len {
                    if keys[b * k_len + j] == PAD_ID as usize || (causal && j > i) {
                        data[(b * q_len + i) * k_len + j] = masked;
                    }
                }
            }
        }
        m
    }

    /// Encoder output `[batch * src_len, d]`.
    pub fn encode_graph<'a>(
        &self,
        g: &mut Graph<'a, T>,
        vars: &[Var],
        src: &[usize],
        batch: usize,
        src_len: usize,
        drop: &mut Option<DropoutCtx<'_>>,
    ) -> Result<Var> {
        self.check_positions(src_len)?;
        let mask = Self::build_mask(src, batch, src_len, src_len, false);
        let mut x = self.embed(g, vars, src, batch, src_len)?;
        x = Self::dropout(g, x, self.config.dropout_prepost, drop);
        for layer in &self.layout.encoder {
            let h = self.norm(g, vars, x, layer.ln_attn)?;
            let a = self.attention(g, vars, &layer.attn, h, h, &mask, batch, src_len, src_len, drop)?;
            x = self.residual(g, x, a, drop)?;
            let h = self.norm(g, vars, x, layer.ln_ff)?;
            let f = self.feed_forward(g, vars, &layer.ff, h, drop)?;
            x = self.residual(g, x, f, drop)?;
        }
        self.norm(g, vars, x, self.layout.enc_final)
    }

    /// Logits `[batch * tgt_len, vocab]` for a padded batch.
    pub fn forward_graph<'a>(
        &self,
        g: &mut Graph<'a, T>,
        vars: &[Var],
        batch: &PaddedBatch,
        mut drop: Option<DropoutCtx<'_>>,
    ) -> Result<Var> {
        let (n, ts, tt) = (batch.batch, batch.src_len, batch.tgt_len);
        self.check_positions(tt)?;
        let memory = self.encode_graph(g, vars, &batch.src, n, ts, &mut drop)?;
        let self_mask = Self::build_mask(&batch.tgt_in, n, tt, tt, true);
        // Decoder inputs are never padding before the last real token, so only
        // the source side needs a key mask for cross-attention.
        let cross_mask = Self::build_mask(&batch.src, n, tt, ts, false);
        let mut x = self.embed(g, vars, &batch.tgt_in, n, tt)?;
        x = Self::dropout(g, x, self.config.dropout_prepost, &mut drop);
        for layer in &self.layout.decoder {
            let h = self.norm(g, vars, x, layer.ln_self)?;
            let a = self.attention(g, vars, &layer.self_attn, h, h, &self_mask, n, tt, tt, &mut drop)?;
            x = self.residual(g, x, a, &mut drop)?;
            let h = self.norm(g, vars, x, layer.ln_cross)?;
            let a = self.attention(g, vars, &layer.cross_attn, h, memory, &cross_mask, n, tt, ts, &mut drop)?;
            x = self.residual(g, x, a, &mut drop)?;
            let h = self.norm(g, vars, x, layer.ln_ff)?;
            let f = self.feed_forward(g, vars, &layer.ff, h, &mut drop)?;
            x = self.residual(g, x, f, &mut drop)?;
        }
        let x = self.norm(g, vars, x, self.layout.dec_final)?;
        g.matmul_nt(x, vars[self.layout.output])
    }

    /// Label-smoothed training loss of a batch.
    pub fn loss_graph<'a>(
        &self,
        g: &mut Graph<'a, T>,
        vars: &[Var],
        batch: &PaddedBatch,
        smoothing: f64,
        drop: Option<DropoutCtx<'_>>,
    ) -> Result<Var> {
        let logits = self.forward_graph(g, vars, batch, drop)?;
        g.smoothed_ce(logits, &batch.targets, smoothing)
    }

    /// Inference forward: logits `[batch, tgt_len, vocab]` for padded id rows.
    pub fn forward(&self, source_ids: &[Vec<u32>], target_in: &[Vec<u32>]) -> Result<Tensor<T>> {
        if source_ids.len() != target_in.len() || source_ids.is_empty() {
            return Err(Error::contract("forward needs equally many non-empty source and target rows"));
        }
        // Shifted targets are given directly, so append a dummy next token.
        let padded: Vec<Vec<u32>> = target_in
            .iter()
            .map(|t| {
                let mut v = t.clone();
                v.push(PAD_ID);
                v
            })
            .collect();
        let pairs: Vec<(&[u32], &[u32])> = source_ids
            .iter()
            .zip(&padded)
            .map(|(s, t)| (s.as_slice(), t.as_slice()))
            .collect();
        let batch = PaddedBatch::from_pairs(&pairs)?;
        let vocab = self.config.vocab_size;
        for &id in batch.src.iter().chain(&batch.tgt_in) {
            if id >= vocab {
                return Err(Error::contract(format!("token id {id} outside vocabulary of size {vocab}")));
            }
        }
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let logits = self.forward_graph(&mut g, &vars, &batch, None)?;
        g.value(logits).clone().reshape(&[batch.batch, batch.tgt_len, vocab])
    }
}
