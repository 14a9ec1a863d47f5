use super::{gemm, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with frozen running statistics.
    Infer { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, rows: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddTrailing { x: Var, b: Var },
    Scale { x: Var, s: f64 },
    Relu { x: Var },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64>, training: bool },
    Embedding { table: Var, rows: Vec<Option<usize>>, dim: usize },
    MaskedMean { x: Var, mask: Vec<bool>, t: usize, d: usize },
    MeanRange { x: Var, n: usize, d: usize, start: usize, end: usize },
    SplitHeads { x: Var, b: usize, n: usize, h: usize, dk: usize },
    MergeHeads { x: Var, b: usize, n: usize, h: usize, dk: usize },
    Concat { parts: Vec<(Var, usize)>, b: usize, d: usize },
    Slice { x: Var, n: usize, d: usize, start: usize, len: usize },
    Reshape { x: Var },
    Sum { x: Var },
    Huber { pred: Var, target: Vec<f64>, weights: Option<Vec<f64>>, delta: f64, denom: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    /// Accumulated gradient; only leaves that require grad keep one.
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Linear record of operations in execution order.
///
/// Nodes are appended as ops run, so the node list is already a
/// topological order; backward walks it in reverse once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() }
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().expect("tensor has at least one axis")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that does not take part in differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Leaf whose gradient is accumulated by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        let n = value.len();
        let v = self.push(value, true, Op::Leaf);
        self.nodes[v.0].grad = Some(vec![0.0; n]);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf created with [`Tape::param`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    /// `a` is [.., k] (leading axes flattened into rows), `b` is [k, n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.shape().len() < 2 || last_dim(ta) != tb.shape()[0] {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let k = last_dim(ta);
        let n = tb.shape()[1];
        let rows = ta.len() / k;
        let mut out = vec![0.0; rows * n];
        gemm(rows, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::MatMul { a, b, rows, k, n }))
    }

    /// Batched product over the leading axis: [B, m, k] x [B, k, n], or
    /// [B, m, k] x [B, n, k]^T when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err("bmm", sa, sb));
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..(i + 1) * m * k],
                false,
                &tb.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(value, rg, Op::Bmm { a, b, batch, m, k, n, trans_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Mul { a, b }))
    }

    /// Adds `b` to every trailing block of `x`; `b`'s shape must be a
    /// suffix of `x`'s shape (bias vectors, per-position tables).
    pub fn add_trailing(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (sx, sb) = (tx.shape(), tb.shape());
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(shape_err("add_trailing", sx, sb));
        }
        let block = tb.len();
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(block) {
            for (v, bias) in chunk.iter_mut().zip(tb.data()) {
                *v += bias;
            }
        }
        let value = Tensor::new(sx.to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(value, rg, Op::AddTrailing { x, b }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * s).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, rg, Op::Scale { x, s })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, rg, Op::Relu { x })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() {
            return Err(TensorError::invalid("softmax", format!("axis {axis} invalid for shape {shape:?}")));
        }
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(src[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let value = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Softmax { x, outer, len, inner }))
    }

    /// Normalizes each row of the last axis to zero mean and unit
    /// variance, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let d = last_dim(tx);
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(shape_err("layer_norm", tx.shape(), self.value(gamma).shape()));
        }
        let rows = tx.len() / d;
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        for (r, row) in tx.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out = xhat.chunks(d).flat_map(|row| row.iter().zip(g).zip(b).map(|((xh, g), b)| g * xh + b)).collect();
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, rg, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Per-channel batch normalization over every leading position of
    /// `x` (last axis = channels). Training mode also returns the batch
    /// mean and biased variance so the caller can update running stats.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>), TensorError> {
        let tx = self.value(x);
        let c = last_dim(tx);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err("batch_norm", tx.shape(), self.value(gamma).shape()));
        }
        let rows = tx.len() / c;
        let data = tx.data();
        let (mean, var, training) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                for row in data.chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for row in data.chunks(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                (mean, var, true)
            }
            BatchNormMode::Infer { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::invalid("batch_norm", "running stats do not match channel count"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; data.len()];
        for (row_out, row) in xhat.chunks_mut(c).zip(data.chunks(c)) {
            for j in 0..c {
                row_out[j] = (row[j] - mean[j]) * rstd[j];
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out = xhat.chunks(c).flat_map(|row| row.iter().zip(g).zip(b).map(|((xh, g), b)| g * xh + b)).collect();
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let var_out = self.push(value, rg, Op::BatchNorm { x, gamma, beta, xhat, rstd, training });
        Ok((var_out, training.then_some(BatchStats { mean, var })))
    }

    /// Looks up rows of `table` ([V, d]) for `ids` laid out with shape
    /// `ids_shape`. Positions whose mask is false produce zero vectors and
    /// receive no gradient; row 0 (padding) never receives gradient.
    pub fn embedding_masked(&mut self, table: Var, ids: &[usize], mask: &[bool], ids_shape: &[usize]) -> Result<Var, TensorError> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(TensorError::invalid("embedding", format!("table must be 2-D, got {:?}", tt.shape())));
        }
        let (vocab, dim) = (tt.shape()[0], tt.shape()[1]);
        if ids.len() != mask.len() || ids.len() != ids_shape.iter().product::<usize>() {
            return Err(TensorError::invalid("embedding", "ids, mask and shape disagree"));
        }
        let mut rows = Vec::with_capacity(ids.len());
        let mut out = vec![0.0; ids.len() * dim];
        for (p, (&id, &keep)) in ids.iter().zip(mask).enumerate() {
            if id >= vocab {
                return Err(TensorError::OutOfVocabulary { id, vocab });
            }
            if keep {
                out[p * dim..(p + 1) * dim].copy_from_slice(&tt.data()[id * dim..(id + 1) * dim]);
                rows.push(Some(id));
            } else {
                rows.push(None);
            }
        }
        let mut shape = ids_shape.to_vec();
        shape.push(dim);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(table);
        Ok(self.push(value, rg, Op::Embedding { table, rows, dim }))
    }

    /// Mean over axis -2 of `x` ([.., T, d]) restricted to positions where
    /// `mask` ([.., T]) is true. Fully masked slices yield zeros.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() < 2 {
            return Err(TensorError::invalid("masked_mean", format!("need rank >= 2, got {s:?}")));
        }
        let (t, d) = (s[s.len() - 2], s[s.len() - 1]);
        let outer = tx.len() / (t * d);
        if mask.len() != outer * t {
            return Err(TensorError::invalid("masked_mean", "mask length does not match input"));
        }
        let mut out = vec![0.0; outer * d];
        for o in 0..outer {
            let m = &mask[o * t..(o + 1) * t];
            let count = m.iter().filter(|&&b| b).count();
            if count == 0 {
                continue;
            }
            let dst = &mut out[o * d..(o + 1) * d];
            for (ti, _) in m.iter().enumerate().filter(|(_, &b)| b) {
                let src = &tx.data()[(o * t + ti) * d..(o * t + ti + 1) * d];
                for (a, v) in dst.iter_mut().zip(src) {
                    *a += v;
                }
            }
            dst.iter_mut().for_each(|a| *a /= count as f64);
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.push(d);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::MaskedMean { x, mask: mask.to_vec(), t, d }))
    }

    /// Mean of `x` ([B, n, d]) over positions `start..end` of axis 1.
    pub fn mean_range(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 3 || start >= end || end > s[1] {
            return Err(TensorError::invalid("mean_range", format!("range {start}..{end} invalid for {s:?}")));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let width = (end - start) as f64;
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for p in start..end {
                let src = &tx.data()[(bi * n + p) * d..(bi * n + p + 1) * d];
                for (a, v) in out[bi * d..(bi + 1) * d].iter_mut().zip(src) {
                    *a += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= width);
        let value = Tensor::new(vec![b, d], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::MeanRange { x, n, d, start, end }))
    }

    /// [B, n, h*dk] -> [B*h, n, dk]
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(TensorError::invalid("split_heads", format!("cannot split {s:?} into {heads} heads")));
        }
        let (b, n, h, dk) = (s[0], s[1], heads, s[2] / heads);
        let mut out = vec![0.0; tx.len()];
        for bi in 0..b {
            for p in 0..n {
                for hi in 0..h {
                    let src = ((bi * n + p) * h + hi) * dk;
                    let dst = (((bi * h + hi) * n) + p) * dk;
                    out[dst..dst + dk].copy_from_slice(&tx.data()[src..src + dk]);
                }
            }
        }
        let value = Tensor::new(vec![b * h, n, dk], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::SplitHeads { x, b, n, h, dk }))
    }

    /// [B*h, n, dk] -> [B, n, h*dk]
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return Err(TensorError::invalid("merge_heads", format!("cannot merge {s:?} from {heads} heads")));
        }
        let (b, n, h, dk) = (s[0] / heads, s[1], heads, s[2]);
        let mut out = vec![0.0; tx.len()];
        for bi in 0..b {
            for p in 0..n {
                for hi in 0..h {
                    let dst = ((bi * n + p) * h + hi) * dk;
                    let src = (((bi * h + hi) * n) + p) * dk;
                    out[dst..dst + dk].copy_from_slice(&tx.data()[src..src + dk]);
                }
            }
        }
        let value = Tensor::new(vec![b, n, h * dk], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::MergeHeads { x, b, n, h, dk }))
    }

    /// Concatenates [B, n_i, d] tensors along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 3 {
            return Err(TensorError::invalid("concat", format!("need rank 3, got {s0:?}")));
        }
        let (b, d) = (s0[0], s0[2]);
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[0] != b || s[2] != d {
                return Err(shape_err("concat", &s0, s));
            }
            lens.push((p, s[1]));
        }
        let total: usize = lens.iter().map(|(_, n)| n).sum();
        let mut out = Vec::with_capacity(b * total * d);
        for bi in 0..b {
            for &(p, n) in &lens {
                out.extend_from_slice(&self.value(p).data()[bi * n * d..(bi + 1) * n * d]);
            }
        }
        let value = Tensor::new(vec![b, total, d], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, rg, Op::Concat { parts: lens, b, d }))
    }

    /// Positions `start..start+len` of axis 1 of a [B, n, d] tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 3 || len == 0 || start + len > s[1] {
            return Err(TensorError::invalid("slice", format!("slice {start}+{len} invalid for {s:?}")));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * len * d);
        for bi in 0..b {
            out.extend_from_slice(&tx.data()[(bi * n + start) * d..(bi * n + start + len) * d]);
        }
        let value = Tensor::new(vec![b, len, d], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Slice { x, n, d, start, len }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Reshape { x }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum { x })
    }

    /// Mean Huber loss between `pred` and `target`. With `weights`, the
    /// mean is taken over the weighted entries only (weights 0/1 mask out
    /// missing labels).
    pub fn huber_loss(&mut self, pred: Var, target: &Tensor, delta: f64, weights: Option<&[f64]>) -> Result<Var, TensorError> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(TensorError::invalid("huber_loss", format!("delta must be positive, got {delta}")));
        }
        let tp = self.value(pred);
        if tp.shape() != target.shape() {
            return Err(shape_err("huber_loss", tp.shape(), target.shape()));
        }
        if let Some(w) = weights {
            if w.len() != tp.len() {
                return Err(TensorError::invalid("huber_loss", "weights length does not match prediction"));
            }
        }
        let mut total = 0.0;
        let mut denom = 0.0;
        for (i, (&yhat, &y)) in tp.data().iter().zip(target.data()).enumerate() {
            let w = weights.map_or(1.0, |w| w[i]);
            total += w * huber(y - yhat, delta);
            denom += w;
        }
        let denom = if denom > 0.0 { denom } else { 1.0 };
        let value = Tensor::scalar(total / denom);
        let rg = self.rg(pred);
        let op = Op::Huber { pred, target: target.data().to_vec(), weights: weights.map(<[f64]>::to_vec), delta, denom };
        Ok(self.push(value, rg, op))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate
    /// across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(nodes, &mut grads, node, &g);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Some(acc)) = (g, self.nodes[i].grad.as_mut()) {
                for (a, v) in acc.iter_mut().zip(&g) {
                    *a += v;
                }
            }
        }
        Ok(())
    }
}

/// Huber penalty of a single residual.
pub(crate) fn huber(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        0.5 * e * e
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn with_grad(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let mut buf = grads[v.0].take().unwrap_or_else(|| vec![0.0; nodes[v.0].value.len()]);
    f(&mut buf);
    grads[v.0] = Some(buf);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, rows, k, n } => {
            let (rows, k, n) = (*rows, *k, *n);
            with_grad(grads, nodes, *a, |da| gemm(rows, n, k, g, false, val(*b), true, da, true));
            with_grad(grads, nodes, *b, |db| gemm(k, rows, n, val(*a), true, g, false, db, true));
        }
        Op::Bmm { a, b, batch, m, k, n, trans_b } => {
            let (m, k, n) = (*m, *k, *n);
            for i in 0..*batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let ai = &val(*a)[i * m * k..(i + 1) * m * k];
                let bi = &val(*b)[i * k * n..(i + 1) * k * n];
                with_grad(grads, nodes, *a, |da| {
                    // da = g·b^T, or g·b when b was used transposed.
                    gemm(m, n, k, gi, false, bi, !*trans_b, &mut da[i * m * k..(i + 1) * m * k], true)
                });
                with_grad(grads, nodes, *b, |db| {
                    let dbi = &mut db[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        gemm(n, m, k, gi, true, ai, false, dbi, true)
                    } else {
                        gemm(k, m, n, ai, true, gi, false, dbi, true)
                    }
                });
            }
        }
        Op::Add { a, b } => {
            with_grad(grads, nodes, *a, |da| add_into(da, g));
            with_grad(grads, nodes, *b, |db| add_into(db, g));
        }
        Op::Mul { a, b } => {
            let (va, vb) = (val(*a).to_vec(), val(*b).to_vec());
            with_grad(grads, nodes, *a, |da| {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(&vb) {
                    *d += gi * y;
                }
            });
            with_grad(grads, nodes, *b, |db| {
                for ((d, gi), x) in db.iter_mut().zip(g).zip(&va) {
                    *d += gi * x;
                }
            });
        }
        Op::AddTrailing { x, b } => {
            with_grad(grads, nodes, *x, |dx| add_into(dx, g));
            with_grad(grads, nodes, *b, |db| {
                for chunk in g.chunks(db.len()) {
                    add_into(db, chunk);
                }
            });
        }
        Op::Scale { x, s } => {
            with_grad(grads, nodes, *x, |dx| {
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d += gi * s;
                }
            });
        }
        Op::Relu { x } => {
            let xv = val(*x);
            with_grad(grads, nodes, *x, |dx| {
                for ((d, gi), v) in dx.iter_mut().zip(g).zip(xv) {
                    if *v > 0.0 {
                        *d += gi;
                    }
                }
            });
        }
        Op::Softmax { x, outer, len, inner } => {
            let y = node.value.data();
            let (len, inner) = (*len, *inner);
            with_grad(grads, nodes, *x, |dx| {
                for o in 0..*outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            dx[p] += y[p] * (g[p] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let gam = val(*gamma);
            let d = gam.len();
            with_grad(grads, nodes, *gamma, |dg| {
                for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dg[j] += grow[j] * xrow[j];
                    }
                }
            });
            with_grad(grads, nodes, *beta, |db| {
                for grow in g.chunks(d) {
                    add_into(db, grow);
                }
            });
            with_grad(grads, nodes, *x, |dx| {
                let mut dxhat = vec![0.0; d];
                for (r, ((grow, xrow), dxrow)) in g.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                    for j in 0..d {
                        dxhat[j] = grow[j] * gam[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx = dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dxrow[j] += rstd[r] * (dxhat[j] - mean_d - xrow[j] * mean_dx);
                    }
                }
            });
        }
        Op::BatchNorm { x, gamma, beta, xhat, rstd, training } => {
            let gam = val(*gamma);
            let c = gam.len();
            let rows = g.len() / c;
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                for j in 0..c {
                    sum_g[j] += grow[j];
                    sum_gx[j] += grow[j] * xrow[j];
                }
            }
            with_grad(grads, nodes, *gamma, |dg| add_into(dg, &sum_gx));
            with_grad(grads, nodes, *beta, |db| add_into(db, &sum_g));
            with_grad(grads, nodes, *x, |dx| {
                let nf = rows as f64;
                for ((grow, xrow), dxrow) in g.chunks(c).zip(xhat.chunks(c)).zip(dx.chunks_mut(c)) {
                    for j in 0..c {
                        let k = gam[j] * rstd[j];
                        if *training {
                            dxrow[j] += k * (grow[j] - sum_g[j] / nf - xrow[j] * sum_gx[j] / nf);
                        } else {
                            dxrow[j] += k * grow[j];
                        }
                    }
                }
            });
        }
        Op::Embedding { table, rows, dim } => {
            let dim = *dim;
            with_grad(grads, nodes, *table, |dt| {
                for (p, row) in rows.iter().enumerate() {
                    match row {
                        Some(id) if *id != 0 => add_into(&mut dt[id * dim..(id + 1) * dim], &g[p * dim..(p + 1) * dim]),
                        _ => {}
                    }
                }
            });
        }
        Op::MaskedMean { x, mask, t, d } => {
            let (t, d) = (*t, *d);
            with_grad(grads, nodes, *x, |dx| {
                for (o, m) in mask.chunks(t).enumerate() {
                    let count = m.iter().filter(|&&b| b).count();
                    if count == 0 {
                        continue;
                    }
                    let go = &g[o * d..(o + 1) * d];
                    for (ti, _) in m.iter().enumerate().filter(|(_, &b)| b) {
                        let dst = &mut dx[(o * t + ti) * d..(o * t + ti + 1) * d];
                        for (a, gv) in dst.iter_mut().zip(go) {
                            *a += gv / count as f64;
                        }
                    }
                }
            });
        }
        Op::MeanRange { x, n, d, start, end } => {
            let (n, d) = (*n, *d);
            let width = (*end - *start) as f64;
            with_grad(grads, nodes, *x, |dx| {
                for (bi, gb) in g.chunks(d).enumerate() {
                    for p in *start..*end {
                        for (a, gv) in dx[(bi * n + p) * d..(bi * n + p + 1) * d].iter_mut().zip(gb) {
                            *a += gv / width;
                        }
                    }
                }
            });
        }
        Op::SplitHeads { x, b, n, h, dk } => {
            let (n, h, dk) = (*n, *h, *dk);
            with_grad(grads, nodes, *x, |dx| {
                for bi in 0..*b {
                    for p in 0..n {
                        for hi in 0..h {
                            let src = ((bi * n + p) * h + hi) * dk;
                            let dst = (((bi * h + hi) * n) + p) * dk;
                            add_into(&mut dx[src..src + dk], &g[dst..dst + dk]);
                        }
                    }
                }
            });
        }
        Op::MergeHeads { x, b, n, h, dk } => {
            let (n, h, dk) = (*n, *h, *dk);
            with_grad(grads, nodes, *x, |dx| {
                for bi in 0..*b {
                    for p in 0..n {
                        for hi in 0..h {
                            let dst = ((bi * n + p) * h + hi) * dk;
                            let src = (((bi * h + hi) * n) + p) * dk;
                            add_into(&mut dx[src..src + dk], &g[dst..dst + dk]);
                        }
                    }
                }
            });
        }
        Op::Concat { parts, b, d } => {
            let total: usize = parts.iter().map(|(_, n)| n).sum();
            let mut offset = 0;
            for &(p, n) in parts {
                with_grad(grads, nodes, p, |dp| {
                    for bi in 0..*b {
                        let src = (bi * total + offset) * d;
                        add_into(&mut dp[bi * n * d..(bi + 1) * n * d], &g[src..src + n * d]);
                    }
                });
                offset += n;
            }
        }
        Op::Slice { x, n, d, start, len } => {
            let (n, d) = (*n, *d);
            with_grad(grads, nodes, *x, |dx| {
                for (bi, gb) in g.chunks(len * d).enumerate() {
                    add_into(&mut dx[(bi * n + start) * d..(bi * n + start + len) * d], gb);
                }
            });
        }
        Op::Reshape { x } => with_grad(grads, nodes, *x, |dx| add_into(dx, g)),
        Op::Sum { x } => with_grad(grads, nodes, *x, |dx| dx.iter_mut().for_each(|d| *d += g[0])),
        Op::Huber { pred, target, weights, delta, denom } => {
            let pv = val(*pred);
            with_grad(grads, nodes, *pred, |dp| {
                for (i, (d, (&yhat, &y))) in dp.iter_mut().zip(pv.iter().zip(target)).enumerate() {
                    let e = y - yhat;
                    let slope = if e.abs() <= *delta { e } else { delta * e.signum() };
                    let w = weights.as_ref().map_or(1.0, |w| w[i]);
                    *d -= g[0] * w * slope / denom;
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(build)/d(input) against backward.
    fn check_grad(input: Tensor, tol: f64, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let x = tape.param(input.clone());
        let loss = build(&mut tape, x);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).unwrap().to_vec();
        let h = 1e-5;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut t = input.clone();
                t.data_mut()[i] += delta;
                let mut tape = Tape::new();
                let x = tape.constant(t);
                let l = build(&mut tape, x);
                tape.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1.0);
            assert!(err < tol, "entry {i}: numeric {numeric} analytic {}", analytic[i]);
        }
    }

    /// Weighted sum so every output entry gets a distinct upstream gradient.
    fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, tape.shape(y));
        let w = tape.constant(w);
        let p = tape.mul(y, w).unwrap();
        tape.sum(p)
    }

    #[test]
    fn matmul_identity_and_small() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let b = tape.constant(Tensor::from_rows(&[vec![2.0], vec![3.0]]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let bc = b.clone();
        check_grad(a.clone(), 1e-5, move |t, x| {
            let b = t.constant(bc.clone());
            let y = t.matmul(x, b).unwrap();
            weighted_sum(t, y, 7)
        });
        check_grad(b, 1e-5, move |t, x| {
            let a = t.constant(a.clone());
            let y = t.matmul(a, x).unwrap();
            weighted_sum(t, y, 7)
        });
    }

    #[test]
    fn bmm_gradients_both_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[2, 4, 5]);
        let bt = rand_tensor(&mut rng, &[2, 5, 4]);
        for (other, trans) in [(b, false), (bt, true)] {
            let o = other.clone();
            check_grad(a.clone(), 1e-5, move |t, x| {
                let o = t.constant(o.clone());
                let y = t.bmm(x, o, trans).unwrap();
                weighted_sum(t, y, 3)
            });
            let a2 = a.clone();
            check_grad(other, 1e-5, move |t, x| {
                let a = t.constant(a2.clone());
                let y = t.bmm(a, x, trans).unwrap();
                weighted_sum(t, y, 3)
            });
        }
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], 1.0);
        assert!(v[1] >= 0.0 && v[1] < 1e-300);
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = rand_tensor(&mut rng, &[3, 4, 5]);
        for axis in 0..3 {
            let mut tape = Tape::new();
            let x = tape.constant(t.scale_for_test(5.0));
            let y = tape.softmax(x, axis).unwrap();
            let v = tape.value(y);
            let s = v.shape().to_vec();
            let inner: usize = s[axis + 1..].iter().product();
            let outer: usize = s[..axis].iter().product();
            for o in 0..outer {
                for i in 0..inner {
                    let sum: f64 = (0..s[axis]).map(|j| v.data()[o * s[axis] * inner + j * inner + i]).sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                }
            }
        }
        let v5 = rand_tensor(&mut rng, &[5]);
        check_grad(v5, 1e-5, |t, x| {
            let y = t.softmax(x, 0).unwrap();
            weighted_sum(t, y, 11)
        });
    }

    impl Tensor {
        fn scale_for_test(&self, s: f64) -> Tensor {
            Tensor::new(self.shape().to_vec(), self.data().iter().map(|v| v * s).collect()).unwrap()
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(Tensor::from_rows(&[vec![5.0, 5.0, 5.0]]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, -1.0]]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-5 && (v[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_statistics_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = rand_tensor(&mut rng, &[4, 8]);
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[8], 1.0));
        let b = tape.constant(Tensor::zeros(&[8]));
        let x = tape.constant(t.clone());
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        for row in tape.value(y).rows() {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
        }
        let gamma = rand_tensor(&mut rng, &[8]);
        let beta = rand_tensor(&mut rng, &[8]);
        let (g2, b2) = (gamma.clone(), beta.clone());
        check_grad(t.clone(), 1e-4, move |tape, x| {
            let g = tape.constant(g2.clone());
            let b = tape.constant(b2.clone());
            let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
            weighted_sum(tape, y, 5)
        });
        let t2 = t.clone();
        check_grad(gamma, 1e-4, move |tape, g| {
            let x = tape.constant(t2.clone());
            let b = tape.constant(beta.clone());
            let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
            weighted_sum(tape, y, 5)
        });
    }

    #[test]
    fn batch_norm_train_and_infer_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = rand_tensor(&mut rng, &[3, 4, 6]);
        let gamma = rand_tensor(&mut rng, &[6]);
        let beta = rand_tensor(&mut rng, &[6]);
        let (g2, b2) = (gamma.clone(), beta.clone());
        check_grad(t.clone(), 1e-4, move |tape, x| {
            let g = tape.constant(g2.clone());
            let b = tape.constant(b2.clone());
            let (y, _) = tape.batch_norm(x, g, b, BatchNormMode::Train, 1e-3).unwrap();
            weighted_sum(tape, y, 9)
        });
        let mean = vec![0.1; 6];
        let var = vec![2.0; 6];
        check_grad(t, 1e-5, move |tape, x| {
            let g = tape.constant(gamma.clone());
            let b = tape.constant(beta.clone());
            let mode = BatchNormMode::Infer { mean: &mean, var: &var };
            let (y, stats) = tape.batch_norm(x, g, b, mode, 1e-3).unwrap();
            assert!(stats.is_none());
            weighted_sum(tape, y, 9)
        });
    }

    #[test]
    fn embedding_masked_cases() {
        let mut tape = Tape::new();
        let mut table = Tensor::zeros(&[8, 4]);
        table.data_mut()[12..16].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let tv = tape.param(table);
        let y = tape.embedding_masked(tv, &[0, 0], &[false, false], &[2]).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let y = tape.embedding_masked(tv, &[3], &[true], &[1]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(tape.embedding_masked(tv, &[8], &[true], &[1]), Err(TensorError::OutOfVocabulary { id: 8, vocab: 8 })));
    }

    #[test]
    fn embedding_masked_rows_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let table = rand_tensor(&mut rng, &[8, 3]);
        let mut tape = Tape::new();
        let tv = tape.param(table);
        let y = tape.embedding_masked(tv, &[7, 2, 0, 2], &[false, true, true, true], &[4]).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let g = tape.grad(tv).unwrap();
        assert_eq!(&g[21..24], &[0.0; 3]);
        assert_eq!(&g[0..3], &[0.0; 3]);
        assert_eq!(&g[6..9], &[2.0; 3]);
    }

    #[test]
    fn masked_mean_and_pooling_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = rand_tensor(&mut rng, &[2, 3, 4]);
        let mask = vec![true, false, true, false, false, false];
        let m2 = mask.clone();
        check_grad(t.clone(), 1e-6, move |tape, x| {
            let y = tape.masked_mean(x, &m2).unwrap();
            weighted_sum(tape, y, 2)
        });
        let mut tape = Tape::new();
        let x = tape.constant(t.clone());
        let y = tape.masked_mean(x, &mask).unwrap();
        assert!(tape.value(y).data()[4..].iter().all(|&v| v == 0.0));
        check_grad(t, 1e-6, |tape, x| {
            let y = tape.mean_range(x, 1, 3).unwrap();
            weighted_sum(tape, y, 4)
        });
    }

    #[test]
    fn heads_concat_slice_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = rand_tensor(&mut rng, &[2, 3, 6]);
        let mut tape = Tape::new();
        let x = tape.constant(t.clone());
        let s = tape.split_heads(x, 3).unwrap();
        assert_eq!(tape.shape(s), &[6, 3, 2]);
        let m = tape.merge_heads(s, 3).unwrap();
        assert_eq!(tape.value(m), &t);
        let a = tape.slice(x, 0, 1).unwrap();
        let b = tape.slice(x, 1, 2).unwrap();
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c), &t);

        check_grad(t.clone(), 1e-6, |tape, x| {
            let s = tape.split_heads(x, 2).unwrap();
            weighted_sum(tape, s, 1)
        });
        check_grad(t, 1e-6, |tape, x| {
            let a = tape.slice(x, 2, 1).unwrap();
            let c = tape.concat(&[a, x]).unwrap();
            let m = tape.merge_heads(c, 2).unwrap();
            weighted_sum(tape, m, 1)
        });
    }

    #[test]
    fn huber_branches() {
        let mut tape = Tape::new();
        let target = Tensor::new(vec![1], vec![0.5]).unwrap();
        let p = tape.constant(Tensor::zeros(&[1]));
        let l = tape.huber_loss(p, &target, 1.0, None).unwrap();
        assert_eq!(tape.value(l).item(), 0.125);
        let target = Tensor::new(vec![1], vec![2.0]).unwrap();
        let l = tape.huber_loss(p, &target, 1.0, None).unwrap();
        assert_eq!(tape.value(l).item(), 1.5);
        let l = tape.huber_loss(p, &Tensor::zeros(&[1]), 1.0, None).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert!(tape.huber_loss(p, &target, 0.0, None).is_err());
        assert!(tape.huber_loss(p, &target, -1.0, None).is_err());
    }

    #[test]
    fn huber_grad_and_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pred = rand_tensor(&mut rng, &[3, 4]).scale_for_test(3.0);
        let target = rand_tensor(&mut rng, &[3, 4]);
        let t2 = target.clone();
        check_grad(pred.clone(), 1e-5, move |tape, x| tape.huber_loss(x, &t2, 0.7, None).unwrap());
        let w: Vec<f64> = (0..12).map(|i| f64::from(i % 2)).collect();
        check_grad(pred, 1e-5, move |tape, x| tape.huber_loss(x, &target, 0.7, Some(&w)).unwrap());
    }

    #[test]
    fn backward_basic_and_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 3]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 6]);
        tape.zero_grad();
        assert_eq!(tape.grad(x).unwrap(), &[0.0; 6]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        let pair = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(pair), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn relu_add_trailing_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = rand_tensor(&mut rng, &[2, 3, 4]);
        let bias = rand_tensor(&mut rng, &[3, 4]);
        let b2 = bias.clone();
        check_grad(t.clone(), 1e-6, move |tape, x| {
            let b = tape.constant(b2.clone());
            let y = tape.add_trailing(x, b).unwrap();
            let r = tape.relu(y);
            weighted_sum(tape, r, 6)
        });
        check_grad(bias, 1e-6, move |tape, b| {
            let x = tape.constant(t.clone());
            let y = tape.add_trailing(x, b).unwrap();
            let y = tape.scale(y, 0.5);
            weighted_sum(tape, y, 6)
        });
    }
}
