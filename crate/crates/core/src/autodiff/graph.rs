use std::borrow::Cow;

use rand::Rng;

use super::kernels::{layer_norm_rows, log_softmax_in_place, softmax_in_place};
use super::real::{cst, MatRef, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    AddMask { x: Var },
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    Reshape(Var),
    Dropout { x: Var, mask: Vec<T> },
    Sum(Var),
    Mean(Var),
    SmoothedCe { logits: Var, targets: Vec<Option<usize>>, smoothing: T, probs: Vec<T>, count: usize },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Computation tape: every operation appends a node whose inputs precede it,
/// so node order is a topological order and backward is a reverse sweep.
///
/// Leaves may borrow their values (model parameters) for the tape's lifetime.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    consumed: bool,
}

impl<'a, T: Real> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), rg, op)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), requires_grad, Op::Leaf)
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, value: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), true, Op::Leaf)
    }

    /// Borrowed leaf that never receives a gradient.
    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), false, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Matrix product `a [m,k] x b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m,k] x b^T` for `b [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); m * n];
        let bref = if trans_b {
            MatRef::transposed(self.value(b).data(), sb[0], sb[1])
        } else {
            MatRef::new(self.value(b).data(), k, n)
        };
        T::gemm(T::one(), MatRef::new(self.value(a).data(), m, k), bref, T::zero(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.derived(value, &[a, b], Op::MatMul { a, b, trans_b }))
    }

    /// Batched product `a [B,m,k] x b [B,k,n]`, or `b [B,n,k]` transposed when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); bsz * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..bsz {
                let asl = &ad[i * m * k..(i + 1) * m * k];
                let bsl = &bd[i * k * n..(i + 1) * k * n];
                let bref = if trans_b {
                    MatRef::transposed(bsl, n, k)
                } else {
                    MatRef::new(bsl, k, n)
                };
                T::gemm(T::one(), MatRef::new(asl, m, k), bref, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
            }
        }
        let value = Tensor::new(vec![bsz, m, n], out)?;
        Ok(self.derived(value, &[a, b], Op::BatchMatMul { a, b, trans_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let mut value = self.value(a).clone();
        add_into(value.data_mut(), self.value(b).data());
        Ok(self.derived(value, &[a, b], Op::Add(a, b)))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(shape_err("add_row", self.shape(x), self.shape(bias)));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data();
        for row in value.data_mut().chunks_exact_mut(n) {
            add_into(row, b);
        }
        Ok(self.derived(value, &[x, bias], Op::AddRow(x, bias)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let mut value = self.value(a).clone();
        for (v, w) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *v *= *w;
        }
        Ok(self.derived(value, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v *= factor;
        }
        self.derived(value, &[x], Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        self.derived(value, &[x], Op::Relu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!("softmax axis {axis} out of range for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut value = self.value(x).clone();
        if inner == 1 {
            for row in value.data_mut().chunks_exact_mut(len) {
                softmax_in_place(row);
            }
        } else {
            let data = value.data_mut();
            let mut buf = vec![T::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    for j in 0..len {
                        buf[j] = data[(o * len + j) * inner + i];
                    }
                    softmax_in_place(&mut buf);
                    for j in 0..len {
                        data[(o * len + j) * inner + i] = buf[j];
                    }
                }
            }
        }
        Ok(self.derived(value, &[x], Op::Softmax { x, outer, len, inner }))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let n = self.value(x).last_dim();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_exact_mut(n) {
            log_softmax_in_place(row);
        }
        self.derived(value, &[x], Op::LogSoftmax(x))
    }

    /// Layer normalization over the last axis followed by `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let dim = self.value(x).last_dim();
        if self.shape(gain) != [dim] || self.shape(bias) != [dim] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let rows = xv.numel() / dim.max(1);
        let mut out = vec![T::zero(); xv.numel()];
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        layer_norm_rows(
            xv.data(),
            dim,
            self.value(gain).data(),
            self.value(bias).data(),
            cst(eps),
            &mut out,
            Some(&mut xhat),
            Some(&mut rstd),
        );
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.derived(value, &[x, gain, bias], Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Gathers rows of `table [V,d]`, producing `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(shape_err("embedding", &shape, &[ids.len()]));
        }
        let (vocab, dim) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(ids.len() * dim);
        let data = self.value(table).data();
        for &id in ids {
            if id >= vocab {
                return Err(Error::contract(format!("token id {id} outside vocabulary of size {vocab}")));
            }
            out.extend_from_slice(&data[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], out)?;
        Ok(self.derived(
            value,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Adds a constant `[B, q, k]` mask to attention scores `[B*heads, q, k]`.
    pub fn add_mask(&mut self, x: Var, mask: &Tensor<T>, heads: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sm = mask.shape();
        if sx.len() != 3 || sm.len() != 3 || sx[0] != sm[0] * heads || sx[1..] != sm[1..] {
            return Err(shape_err("add_mask", &sx, sm));
        }
        let block = sx[1] * sx[2];
        let mut value = self.value(x).clone();
        for (i, chunk) in value.data_mut().chunks_exact_mut(block).enumerate() {
            let b = i / heads;
            add_into(chunk, &mask.data()[b * block..(b + 1) * block]);
        }
        Ok(self.derived(value, &[x], Op::AddMask { x }))
    }

    /// `[batch*seq, heads*dk] -> [batch*heads, seq, dk]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != batch * seq || heads == 0 || s[1] % heads != 0 {
            return Err(shape_err("split_heads", &s, &[batch, seq, heads]));
        }
        let d = s[1];
        let dk = d / heads;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for t in 0..seq {
                let row = &src[(b * seq + t) * d..(b * seq + t + 1) * d];
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + t) * dk;
                    out[dst..dst + dk].copy_from_slice(&row[h * dk..(h + 1) * dk]);
                }
            }
        }
        let value = Tensor::new(vec![batch * heads, seq, dk], out)?;
        Ok(self.derived(value, &[x], Op::SplitHeads { x, batch, seq, heads }))
    }

    /// `[batch*heads, seq, dk] -> [batch*seq, heads*dk]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != batch * heads || s[1] != seq {
            return Err(shape_err("merge_heads", &s, &[batch, seq, heads]));
        }
        let dk = s[2];
        let d = dk * heads;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let from = ((b * heads + h) * seq + t) * dk;
                    let to = (b * seq + t) * d + h * dk;
                    out[to..to + dk].copy_from_slice(&src[from..from + dk]);
                }
            }
        }
        let value = Tensor::new(vec![batch * seq, d], out)?;
        Ok(self.derived(value, &[x], Op::MergeHeads { x, batch, seq, heads }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.derived(value, &[x], Op::Reshape(x)))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = cst::<T>(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mut value = self.value(x).clone();
        for (v, m) in value.data_mut().iter_mut().zip(&mask) {
            *v *= *m;
        }
        self.derived(value, &[x], Op::Dropout { x, mask })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.derived(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel().max(1)).expect("numel");
        self.derived(Tensor::scalar(s), &[x], Op::Mean(x))
    }

    /// Label-smoothed cross-entropy averaged over non-padding rows of
    /// `logits [N, V]`. A `None` target marks a padding row.
    ///
    /// Per row: `-[(1 - s) log p(gold) + s / (V - 1) * sum_{k != gold} log p(k)]`.
    pub fn smoothed_ce(&mut self, logits: Var, targets: &[Option<usize>], smoothing: f64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(shape_err("smoothed_ce", &shape, &[targets.len()]));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::contract(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        let vocab = shape[1];
        if smoothing > 0.0 && vocab < 2 {
            return Err(Error::contract("label smoothing needs a vocabulary of at least 2"));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::contract("cross-entropy over an all-padding batch"));
        }
        let s = cst::<T>(smoothing);
        let off = if vocab > 1 { s / T::from_usize(vocab - 1).expect("vocab") } else { T::zero() };
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (row, target) in probs.chunks_exact_mut(vocab).zip(targets) {
            let Some(gold) = *target else { continue };
            if gold >= vocab {
                return Err(Error::contract(format!("target id {gold} outside vocabulary of size {vocab}")));
            }
            log_softmax_in_place(row);
            let all: T = row.iter().copied().sum();
            let lp_gold = row[gold];
            total -= (T::one() - s) * lp_gold + off * (all - lp_gold);
            for v in row.iter_mut() {
                *v = v.exp();
            }
        }
        let loss = total / T::from_usize(count).expect("count");
        Ok(self.derived(
            Tensor::scalar(loss),
            &[logits],
            Op::SmoothedCe {
                logits,
                targets: targets.to_vec(),
                smoothing: s,
                probs,
                count,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. A tape supports exactly one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = node.grad.as_deref() else { continue };
            backprop(before, &node.op, node.value.as_ref(), gout);
        }
        Ok(())
    }
}

/// Takes the gradient buffer of `v` (allocating zeros), lets `f` accumulate
/// into it with read access to all earlier node values, and stores it back.
fn accumulate<T: Real>(nodes: &mut [Node<'_, T>], v: Var, f: impl FnOnce(&[Node<'_, T>], &mut [T])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let n = nodes[v.0].value.numel();
    let mut g = nodes[v.0].grad.take().unwrap_or_else(|| vec![T::zero(); n]);
    f(nodes, &mut g);
    nodes[v.0].grad = Some(g);
}

fn backprop<T: Real>(nodes: &mut [Node<'_, T>], op: &Op<T>, out: &Tensor<T>, gout: &[T]) {
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = out.shape()[1];
            let dc = MatRef::new(gout, m, n);
            accumulate(nodes, *a, |ns, g| {
                let bd = ns[b.0].value.data();
                // dA = dC * B_eff^T
                let bt = if *trans_b { MatRef::new(bd, n, k) } else { MatRef::transposed(bd, k, n) };
                T::gemm(T::one(), dc, bt, T::one(), g);
            });
            accumulate(nodes, *b, |ns, g| {
                let ad = ns[a.0].value.data();
                if *trans_b {
                    // dB [n,k] = dC^T * A
                    T::gemm(T::one(), dc.t(), MatRef::new(ad, m, k), T::one(), g);
                } else {
                    // dB [k,n] = A^T * dC
                    T::gemm(T::one(), MatRef::transposed(ad, m, k), dc, T::one(), g);
                }
            });
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let sa = nodes[a.0].value.shape().to_vec();
            let (bsz, m, k) = (sa[0], sa[1], sa[2]);
            let n = out.shape()[2];
            accumulate(nodes, *a, |ns, g| {
                let bd = ns[b.0].value.data();
                for i in 0..bsz {
                    let bsl = &bd[i * k * n..(i + 1) * k * n];
                    let bt = if *trans_b { MatRef::new(bsl, n, k) } else { MatRef::transposed(bsl, k, n) };
                    let dc = MatRef::new(&gout[i * m * n..(i + 1) * m * n], m, n);
                    T::gemm(T::one(), dc, bt, T::one(), &mut g[i * m * k..(i + 1) * m * k]);
                }
            });
            accumulate(nodes, *b, |ns, g| {
                let ad = ns[a.0].value.data();
                for i in 0..bsz {
                    let asl = &ad[i * m * k..(i + 1) * m * k];
                    let dc = MatRef::new(&gout[i * m * n..(i + 1) * m * n], m, n);
                    let dst = &mut g[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        T::gemm(T::one(), dc.t(), MatRef::new(asl, m, k), T::one(), dst);
                    } else {
                        T::gemm(T::one(), MatRef::transposed(asl, m, k), dc, T::one(), dst);
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, *a, |_, g| add_into(g, gout));
            accumulate(nodes, *b, |_, g| add_into(g, gout));
        }
        Op::AddRow(x, bias) => {
            accumulate(nodes, *x, |_, g| add_into(g, gout));
            accumulate(nodes, *bias, |_, g| {
                let n = g.len();
                for row in gout.chunks_exact(n) {
                    add_into(g, row);
                }
            });
        }
        Op::Mul(a, b) => {
            accumulate(nodes, *a, |ns, g| {
                for ((gi, &go), &bv) in g.iter_mut().zip(gout).zip(ns[b.0].value.data()) {
                    *gi += go * bv;
                }
            });
            accumulate(nodes, *b, |ns, g| {
                for ((gi, &go), &av) in g.iter_mut().zip(gout).zip(ns[a.0].value.data()) {
                    *gi += go * av;
                }
            });
        }
        Op::Scale(x, f) => accumulate(nodes, *x, |_, g| {
            for (gi, &go) in g.iter_mut().zip(gout) {
                *gi += go * *f;
            }
        }),
        Op::Relu(x) => accumulate(nodes, *x, |_, g| {
            for ((gi, &go), &y) in g.iter_mut().zip(gout).zip(out.data()) {
                if y > T::zero() {
                    *gi += go;
                }
            }
        }),
        Op::Softmax { x, outer, len, inner } => accumulate(nodes, *x, |_, g| {
            let y = out.data();
            for o in 0..*outer {
                for i in 0..*inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dot: T = (0..*len).map(|j| gout[idx(j)] * y[idx(j)]).sum();
                    for j in 0..*len {
                        g[idx(j)] += y[idx(j)] * (gout[idx(j)] - dot);
                    }
                }
            }
        }),
        Op::LogSoftmax(x) => accumulate(nodes, *x, |_, g| {
            let n = out.last_dim();
            for ((grow, gorow), yrow) in g.chunks_exact_mut(n).zip(gout.chunks_exact(n)).zip(out.data().chunks_exact(n)) {
                let total: T = gorow.iter().copied().sum();
                for j in 0..n {
                    grow[j] += gorow[j] - yrow[j].exp() * total;
                }
            }
        }),
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let dim = out.last_dim();
            let nf = T::from_usize(dim).expect("dim");
            accumulate(nodes, *x, |ns, g| {
                let gv = ns[gain.0].value.data();
                let mut dxhat = vec![T::zero(); dim];
                for (r, inv) in rstd.iter().enumerate() {
                    let base = r * dim;
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..dim {
                        dxhat[j] = gout[base + j] * gv[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xhat[base + j];
                    }
                    mean_d /= nf;
                    mean_dx /= nf;
                    for j in 0..dim {
                        g[base + j] += *inv * (dxhat[j] - mean_d - xhat[base + j] * mean_dx);
                    }
                }
            });
            accumulate(nodes, *gain, |_, g| {
                for (gorow, xrow) in gout.chunks_exact(dim).zip(xhat.chunks_exact(dim)) {
                    for j in 0..dim {
                        g[j] += gorow[j] * xrow[j];
                    }
                }
            });
            accumulate(nodes, *bias, |_, g| {
                for row in gout.chunks_exact(dim) {
                    add_into(g, row);
                }
            });
        }
        Op::Embedding { table, ids } => accumulate(nodes, *table, |_, g| {
            let dim = out.last_dim();
            for (r, &id) in ids.iter().enumerate() {
                add_into(&mut g[id * dim..(id + 1) * dim], &gout[r * dim..(r + 1) * dim]);
            }
        }),
        Op::AddMask { x } | Op::Reshape(x) => accumulate(nodes, *x, |_, g| add_into(g, gout)),
        Op::SplitHeads { x, batch, seq, heads } => accumulate(nodes, *x, |_, g| {
            let dk = out.shape()[2];
            let d = dk * heads;
            for b in 0..*batch {
                for t in 0..*seq {
                    for h in 0..*heads {
                        let from = ((b * heads + h) * seq + t) * dk;
                        let to = (b * seq + t) * d + h * dk;
                        add_into(&mut g[to..to + dk], &gout[from..from + dk]);
                    }
                }
            }
        }),
        Op::MergeHeads { x, batch, seq, heads } => accumulate(nodes, *x, |_, g| {
            let d = out.shape()[1];
            let dk = d / heads;
            for b in 0..*batch {
                for h in 0..*heads {
                    for t in 0..*seq {
                        let to = ((b * heads + h) * seq + t) * dk;
                        let from = (b * seq + t) * d + h * dk;
                        add_into(&mut g[to..to + dk], &gout[from..from + dk]);
                    }
                }
            }
        }),
        Op::Dropout { x, mask } => accumulate(nodes, *x, |_, g| {
            for ((gi, &go), &m) in g.iter_mut().zip(gout).zip(mask) {
                *gi += go * m;
            }
        }),
        Op::Sum(x) => accumulate(nodes, *x, |_, g| {
            for gi in g.iter_mut() {
                *gi += gout[0];
            }
        }),
        Op::Mean(x) => accumulate(nodes, *x, |_, g| {
            let share = gout[0] / T::from_usize(g.len().max(1)).expect("len");
            for gi in g.iter_mut() {
                *gi += share;
            }
        }),
        Op::SmoothedCe {
            logits,
            targets,
            smoothing,
            probs,
            count,
        } => accumulate(nodes, *logits, |_, g| {
            let vocab = nodes_vocab(probs.len(), targets.len());
            let off = if vocab > 1 { *smoothing / T::from_usize(vocab - 1).expect("vocab") } else { T::zero() };
            let scale = gout[0] / T::from_usize(*count).expect("count");
            for (r, target) in targets.iter().enumerate() {
                let Some(gold) = *target else { continue };
                let base = r * vocab;
                for k in 0..vocab {
                    let q = if k == gold { T::one() - *smoothing } else { off };
                    g[base + k] += scale * (probs[base + k] - q);
                }
            }
        }),
    }
}

fn nodes_vocab(total: usize, rows: usize) -> usize {
    total / rows.max(1)
}
