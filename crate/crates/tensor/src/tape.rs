use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels::{gemm_acc, log_sum_exp, softmax_row, transpose};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f32 = 1e-5;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    Transpose(Var),
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MaskMul { x: Var, mask: Vec<f32> },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f32>, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    op: Op,
    tracked: bool,
}

/// Define-by-run computation graph. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn mismatch(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

/// Product that yields `+0.0` for a zero mask entry regardless of sign.
fn masked(v: f32, m: f32) -> f32 {
    if m == 0.0 {
        0.0
    } else {
        v * m
    }
}

fn acc_into(slot: &mut Option<Vec<f32>>, len: usize) -> &mut Vec<f32> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, tracked: bool) -> Result<Var> {
        check_finite(op, value.data())?;
        self.nodes.push(Node {
            value,
            grad: None,
            op: node_op,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Record a leaf. Gradients are kept for it only when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            tracked: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf holding a copy of a stored parameter. Repeated requests for the
    /// same parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).value.clone(), true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the most recent `backward` w.r.t. `v`; accumulated across
    /// calls for leaves.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Add the gradient of every parameter leaf into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        let mut entries: Vec<_> = self.params.iter().collect();
        entries.sort();
        for (&id, &v) in entries {
            if let Some(g) = &self.nodes[v.0].grad {
                for (dst, src) in store.get_mut(id).grad.iter_mut().zip(g) {
                    *dst += *src;
                }
            }
        }
    }

    // ---- primitives ------------------------------------------------------

    /// `[n×k] · [k×m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; n * m];
        gemm_acc(ta.data(), tb.data(), &mut out, n, k, m);
        let tracked = self.tracked(&[a, b]);
        self.push("matmul", Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), tracked)
    }

    /// Batched product of `[B×n×k]` with `[B×k×m]`, or with `[B×m×k]`
    /// transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 3 || tb.shape().len() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(mismatch("batch_matmul", ta, tb));
        }
        let (bs, n, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, m) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(mismatch("batch_matmul", ta, tb));
        }
        let mut out = vec![0.0; bs * n * m];
        for i in 0..bs {
            let a_blk = &ta.data()[i * n * k..(i + 1) * n * k];
            let b_blk = &tb.data()[i * k * m..(i + 1) * k * m];
            let o_blk = &mut out[i * n * m..(i + 1) * n * m];
            if trans_b {
                let bt = transpose(b_blk, m, k);
                gemm_acc(a_blk, &bt, o_blk, n, k, m);
            } else {
                gemm_acc(a_blk, b_blk, o_blk, n, k, m);
            }
        }
        let tracked = self.tracked(&[a, b]);
        self.push(
            "batch_matmul",
            Tensor::from_parts(vec![bs, n, m], out),
            Op::BatchMatMul { a, b, trans_b },
            tracked,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let out: Vec<f32> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let tracked = self.tracked(&[a, b]);
        self.push("add", Tensor::from_parts(shape, out), Op::Add(a, b), tracked)
    }

    /// Adds a `[m]` row vector to every row of `[.., m]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(row));
        if tb.shape().len() != 1 || tb.numel() != ta.last_dim() {
            return Err(mismatch("add_row", ta, tb));
        }
        let m = tb.numel();
        let mut out = ta.data().to_vec();
        for chunk in out.chunks_mut(m) {
            for (o, r) in chunk.iter_mut().zip(tb.data()) {
                *o += r;
            }
        }
        let shape = ta.shape().to_vec();
        let tracked = self.tracked(&[a, row]);
        self.push("add_row", Tensor::from_parts(shape, out), Op::AddRow(a, row), tracked)
    }

    /// Adds a same-shape constant that receives no gradient.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(mismatch("add_const", ta, c));
        }
        let out: Vec<f32> = ta.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let tracked = self.tracked(&[a]);
        self.push("add_const", Tensor::from_parts(shape, out), Op::AddConst(a), tracked)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let out: Vec<f32> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let tracked = self.tracked(&[a, b]);
        self.push("mul", Tensor::from_parts(shape, out), Op::Mul(a, b), tracked)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        if !c.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        let ta = self.value(a);
        let out: Vec<f32> = ta.data().iter().map(|x| x * c).collect();
        let shape = ta.shape().to_vec();
        let tracked = self.tracked(&[a]);
        self.push("scale", Tensor::from_parts(shape, out), Op::Scale(a, c), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out: Vec<f32> = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = ta.shape().to_vec();
        let tracked = self.tracked(&[a]);
        self.push("relu", Tensor::from_parts(shape, out), Op::Relu(a), tracked)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let m = ta.last_dim();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(m) {
            softmax_row(row);
        }
        let shape = ta.shape().to_vec();
        let tracked = self.tracked(&[a]);
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax(a), tracked)
    }

    /// Layer normalisation over the last dimension with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_dim();
        if tg.numel() != d || tb.numel() != d || tg.shape().len() != 1 || tb.shape().len() != 1 {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        let tracked = self.tracked(&[x, gain, bias]);
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            tracked,
        )
    }

    /// Gathers rows of a `[V×D]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(TensorError::InvalidShape {
                shape: tt.shape().to_vec(),
                reason: "embedding table must be 2-D".into(),
            });
        }
        if ids.is_empty() {
            return Err(TensorError::Usage("embedding_lookup: no ids".into()));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let tracked = self.tracked(&[table]);
        self.push(
            "embedding_lookup",
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding { table, ids: ids.to_vec() },
            tracked,
        )
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Usage("concat: no inputs".into()))?;
        let rows = self.value(*first).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.shape()[0] != rows {
                return Err(mismatch("concat", self.value(*first), t));
            }
            widths.push(t.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let tracked = self.tracked(parts);
        self.push(
            "concat",
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            tracked,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(TensorError::InvalidShape {
                shape: ta.shape().to_vec(),
                reason: "transpose expects a 2-D tensor".into(),
            });
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let out = transpose(ta.data(), r, c);
        let tracked = self.tracked(&[a]);
        self.push("transpose", Tensor::from_parts(vec![c, r], out), Op::Transpose(a), tracked)
    }

    /// `[B·T × H·dh]` → `[B·H × T × dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let tx = self.value(x);
        let width = tx.last_dim();
        if tx.shape().len() != 2 || tx.shape()[0] != batch * seq || heads == 0 || !width.is_multiple_of(heads) {
            return Err(TensorError::InvalidShape {
                shape: tx.shape().to_vec(),
                reason: format!("cannot split into batch {batch}, seq {seq}, heads {heads}"),
            });
        }
        let dh = width / heads;
        let mut out = vec![0.0; tx.numel()];
        for b in 0..batch {
            for t in 0..seq {
                let src = &tx.data()[(b * seq + t) * width..(b * seq + t + 1) * width];
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
                }
            }
        }
        let tracked = self.tracked(&[x]);
        self.push(
            "split_heads",
            Tensor::from_parts(vec![batch * heads, seq, dh], out),
            Op::SplitHeads { x, batch, seq, heads },
            tracked,
        )
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 3 || tx.shape()[0] != batch * heads || tx.shape()[1] != seq {
            return Err(TensorError::InvalidShape {
                shape: tx.shape().to_vec(),
                reason: format!("cannot merge batch {batch}, seq {seq}, heads {heads}"),
            });
        }
        let dh = tx.shape()[2];
        let width = dh * heads;
        let mut out = vec![0.0; tx.numel()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let src = ((b * heads + h) * seq + t) * dh;
                    let dst = (b * seq + t) * width + h * dh;
                    out[dst..dst + dh].copy_from_slice(&tx.data()[src..src + dh]);
                }
            }
        }
        let tracked = self.tracked(&[x]);
        self.push(
            "merge_heads",
            Tensor::from_parts(vec![batch * seq, width], out),
            Op::MergeHeads { x, batch, seq, heads },
            tracked,
        )
    }

    /// Multiplies by a constant mask, either full-shape or broadcast along
    /// the last dimension.
    pub fn mask_mul(&mut self, x: Var, mask: &[f32]) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if mask.len() != d && mask.len() != tx.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "mask_mul",
                lhs: tx.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        check_finite("mask_mul", mask)?;
        let out: Vec<f32> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| masked(*v, mask[i % mask.len()]))
            .collect();
        let shape = tx.shape().to_vec();
        let tracked = self.tracked(&[x]);
        self.push(
            "mask_mul",
            Tensor::from_parts(shape, out),
            Op::MaskMul { x, mask: mask.to_vec() },
            tracked,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f32 = self.value(a).data().iter().sum();
        let tracked = self.tracked(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), tracked)
    }

    /// Mean token cross-entropy of `[N×V]` logits against `targets`; rows
    /// whose target equals `pad_id` are excluded.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape().len() != 2 || tl.shape()[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let v = tl.shape()[1];
        let mut probs = tl.data().to_vec();
        let mut kept = Vec::with_capacity(targets.len());
        let mut total = 0.0f32;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == pad_id {
                kept.push(None);
                continue;
            }
            if t >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    size: v,
                });
            }
            let row = &tl.data()[r * v..(r + 1) * v];
            total += log_sum_exp(row) - row[t];
            count += 1;
            kept.push(Some(t));
        }
        if count == 0 {
            return Err(TensorError::EmptyLossSupport);
        }
        for row in probs.chunks_mut(v) {
            softmax_row(row);
        }
        let loss = total / count as f32;
        let tracked = self.tracked(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: kept, probs, count },
            tracked,
        )
    }

    // ---- reverse mode ----------------------------------------------------

    /// Propagates d(loss)/d(node) to every tracked node reachable from `loss`.
    /// Leaf gradients accumulate across calls; intermediate gradients hold
    /// the most recent call's values.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if !node.tracked {
            return Err(TensorError::Usage("backward called on an untracked tensor".into()));
        }
        if node.value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            check_finite("backward", &g)?;
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[i];
            match (&node.op, &mut node.grad) {
                (Op::Leaf, Some(existing)) => {
                    for (e, v) in existing.iter_mut().zip(&g) {
                        *e += v;
                    }
                }
                (_, slot) => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let numel = |v: Var| self.nodes[v.0].value.numel();
        let wants = |v: Var| self.nodes[v.0].tracked;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    let bt = transpose(tb.data(), k, m);
                    gemm_acc(g, &bt, acc_into(&mut grads[a.0], n * k), n, m, k);
                }
                if wants(*b) {
                    let at = transpose(ta.data(), n, k);
                    gemm_acc(&at, g, acc_into(&mut grads[b.0], k * m), k, n, m);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, n, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let m = if *trans_b { tb.shape()[1] } else { tb.shape()[2] };
                for blk in 0..bs {
                    let a_blk = &ta.data()[blk * n * k..(blk + 1) * n * k];
                    let b_blk = &tb.data()[blk * k * m..(blk + 1) * k * m];
                    let g_blk = &g[blk * n * m..(blk + 1) * n * m];
                    if wants(*a) {
                        let da = &mut acc_into(&mut grads[a.0], bs * n * k)[blk * n * k..(blk + 1) * n * k];
                        if *trans_b {
                            // b is [m×k]
                            gemm_acc(g_blk, b_blk, da, n, m, k);
                        } else {
                            let bt = transpose(b_blk, k, m);
                            gemm_acc(g_blk, &bt, da, n, m, k);
                        }
                    }
                    if wants(*b) {
                        let db = &mut acc_into(&mut grads[b.0], bs * k * m)[blk * k * m..(blk + 1) * k * m];
                        if *trans_b {
                            let gt = transpose(g_blk, n, m);
                            gemm_acc(&gt, a_blk, db, m, n, k);
                        } else {
                            let at = transpose(a_blk, n, k);
                            gemm_acc(&at, g_blk, db, k, n, m);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        let dst = acc_into(&mut grads[v.0], g.len());
                        dst.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    let dst = acc_into(&mut grads[a.0], g.len());
                    dst.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if wants(*row) {
                    let m = numel(*row);
                    let dst = acc_into(&mut grads[row.0], m);
                    for chunk in g.chunks(m) {
                        dst.iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::AddConst(a) => {
                if wants(*a) {
                    let dst = acc_into(&mut grads[a.0], g.len());
                    dst.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    let dst = acc_into(&mut grads[a.0], g.len());
                    for j in 0..g.len() {
                        dst[j] += g[j] * tb[j];
                    }
                }
                if wants(*b) {
                    let dst = acc_into(&mut grads[b.0], g.len());
                    for j in 0..g.len() {
                        dst[j] += g[j] * ta[j];
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    let dst = acc_into(&mut grads[a.0], g.len());
                    dst.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let x = self.value(*a).data();
                    let dst = acc_into(&mut grads[a.0], g.len());
                    for j in 0..g.len() {
                        if x[j] > 0.0 {
                            dst[j] += g[j];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let y = self.nodes[i].value.data();
                    let m = self.nodes[i].value.last_dim();
                    let dst = acc_into(&mut grads[a.0], g.len());
                    for r in 0..g.len() / m {
                        let (yr, gr) = (&y[r * m..(r + 1) * m], &g[r * m..(r + 1) * m]);
                        let dot: f32 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..m {
                            dst[r * m + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = numel(*gain);
                let rows = g.len() / d;
                let gv = self.value(*gain).data();
                if wants(*gain) {
                    let dst = acc_into(&mut grads[gain.0], d);
                    for r in 0..rows {
                        for j in 0..d {
                            dst[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if wants(*bias) {
                    let dst = acc_into(&mut grads[bias.0], d);
                    for chunk in g.chunks(d) {
                        dst.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                }
                if wants(*x) {
                    let dst = acc_into(&mut grads[x.0], g.len());
                    let mut dxhat = vec![0.0f32; d];
                    for r in 0..rows {
                        let mut mean_d = 0.0f32;
                        let mut mean_dx = 0.0f32;
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[r * d + j];
                        }
                        mean_d /= d as f32;
                        mean_dx /= d as f32;
                        for j in 0..d {
                            dst[r * d + j] += rstd[r] * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let d = self.value(*table).shape()[1];
                    let dst = acc_into(&mut grads[table.0], numel(*table));
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dst[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.nodes[i].value.shape()[0];
                let total = self.nodes[i].value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if wants(p) {
                        let dst = acc_into(&mut grads[p.0], rows * w);
                        for r in 0..rows {
                            for j in 0..w {
                                dst[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let s = self.nodes[i].value.shape();
                    let gt = transpose(g, s[0], s[1]);
                    let dst = acc_into(&mut grads[a.0], g.len());
                    dst.iter_mut().zip(&gt).for_each(|(d, s)| *d += s);
                }
            }
            Op::SplitHeads { x, batch, seq, heads } => {
                if wants(*x) {
                    let width = self.value(*x).last_dim();
                    let dh = width / heads;
                    let dst = acc_into(&mut grads[x.0], g.len());
                    for b in 0..*batch {
                        for t in 0..*seq {
                            for h in 0..*heads {
                                let src = ((b * heads + h) * seq + t) * dh;
                                let to = (b * seq + t) * width + h * dh;
                                for j in 0..dh {
                                    dst[to + j] += g[src + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, batch, seq, heads } => {
                if wants(*x) {
                    let dh = self.value(*x).shape()[2];
                    let width = dh * heads;
                    let dst = acc_into(&mut grads[x.0], g.len());
                    for b in 0..*batch {
                        for t in 0..*seq {
                            for h in 0..*heads {
                                let to = ((b * heads + h) * seq + t) * dh;
                                let src = (b * seq + t) * width + h * dh;
                                for j in 0..dh {
                                    dst[to + j] += g[src + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::MaskMul { x, mask } => {
                if wants(*x) {
                    let dst = acc_into(&mut grads[x.0], g.len());
                    for j in 0..g.len() {
                        dst[j] += masked(g[j], mask[j % mask.len()]);
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let dst = acc_into(&mut grads[a.0], numel(*a));
                    dst.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if wants(*logits) {
                    let v = self.value(*logits).shape()[1];
                    let scale = g[0] / *count as f32;
                    let dst = acc_into(&mut grads[logits.0], probs.len());
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for j in 0..v {
                            let onehot = if j == *t { 1.0 } else { 0.0 };
                            dst[r * v + j] += scale * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}
