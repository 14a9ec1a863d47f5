//! Tape-level building blocks: parameter binding, the residual conv
//! block and the attention encoder stack.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{BatchNormMode, BatchStats, ParamStore, Tape, Tensor, TensorError, Var};

/// Additive score for keys that must receive zero attention. Large enough
/// that `exp` underflows to exactly 0, small enough to stay finite.
pub(crate) const MASKED_SCORE: f64 = -1e30;

/// One forward pass over a parameter store.
pub(crate) struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a ParamStore,
    /// Trainable parameters become differentiable leaves.
    pub track: bool,
    /// Batch norm uses batch statistics and reports them.
    pub train: bool,
    pub bound: Vec<(String, Var)>,
    pub bn_updates: Vec<(String, BatchStats)>,
    cache: HashMap<String, Var>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a ParamStore, track: bool, train: bool) -> Self {
        Ctx { tape, params, track, train, bound: Vec::new(), bn_updates: Vec::new(), cache: HashMap::new() }
    }

    pub fn p(&mut self, path: &str) -> Result<Var, TensorError> {
        if let Some(&v) = self.cache.get(path) {
            return Ok(v);
        }
        let v = self.params.bind(self.tape, path, self.track)?;
        self.cache.insert(path.to_string(), v);
        if self.track && self.params.get(path)?.trainable {
            self.bound.push((path.to_string(), v));
        }
        Ok(v)
    }

    /// x·W + b for x [.., in].
    pub fn dense(&mut self, x: Var, prefix: &str, bias: bool) -> Result<Var, TensorError> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let y = self.tape.matmul(x, w)?;
        if bias {
            let b = self.p(&format!("{prefix}.bias"))?;
            self.tape.add_trailing(y, b)
        } else {
            Ok(y)
        }
    }

    fn conv_layer(&mut self, x: Var, prefix: &str, eps: f64) -> Result<Var, TensorError> {
        let y = self.dense(x, prefix, true)?;
        let gamma = self.p(&format!("{prefix}.bn.gamma"))?;
        let beta = self.p(&format!("{prefix}.bn.beta"))?;
        let (normed, stats) = if self.train {
            self.tape.batch_norm(y, gamma, beta, BatchNormMode::Train, eps)?
        } else {
            let mean = self.params.value(&format!("{prefix}.bn.running_mean"))?.data();
            let var = self.params.value(&format!("{prefix}.bn.running_var"))?.data();
            self.tape.batch_norm(y, gamma, beta, BatchNormMode::Infer { mean, var }, eps)?
        };
        if let Some(s) = stats {
            self.bn_updates.push((format!("{prefix}.bn"), s));
        }
        Ok(self.tape.relu(normed))
    }

    /// Two kernel-1 conv layers (conv, batch norm, ReLU) plus a projected
    /// shortcut: `F(x) + x·W_s + b_s`. Input is [.., c_in].
    pub fn residual_conv(&mut self, x: Var, prefix: &str, eps: f64) -> Result<Var, TensorError> {
        let h = self.conv_layer(x, &format!("{prefix}.l1"), eps)?;
        let f = self.conv_layer(h, &format!("{prefix}.l2"), eps)?;
        let skip = self.dense(x, &format!("{prefix}.skip"), true)?;
        self.tape.add(f, skip)
    }

    /// One encoder layer on [B, n, d]: multi-head self-attention, add &
    /// norm, FFN, add & norm. Returns the output and the attention weights
    /// as a [B*h, n, n] node.
    pub fn encoder_layer(
        &mut self,
        x: Var,
        prefix: &str,
        heads: usize,
        ln_eps: f64,
        key_bias: Option<Var>,
    ) -> Result<(Var, Var), TensorError> {
        let d = *self.tape.shape(x).last().expect("rank 3");
        let dk = d / heads;
        let q = self.dense(x, &format!("{prefix}.wq"), false)?;
        let k = self.dense(x, &format!("{prefix}.wk"), false)?;
        let v = self.dense(x, &format!("{prefix}.wv"), false)?;
        let (q, k, v) = (self.tape.split_heads(q, heads)?, self.tape.split_heads(k, heads)?, self.tape.split_heads(v, heads)?);
        let scores = self.tape.bmm(q, k, true)?;
        let mut scores = self.tape.scale(scores, 1.0 / (dk as f64).sqrt());
        if let Some(bias) = key_bias {
            scores = self.tape.add(scores, bias)?;
        }
        let attn = self.tape.softmax(scores, 2)?;
        let ctx = self.tape.bmm(attn, v, false)?;
        let merged = self.tape.merge_heads(ctx, heads)?;
        let o = self.dense(merged, &format!("{prefix}.wo"), false)?;

        let res1 = self.tape.add(x, o)?;
        let (g1, b1) = (self.p(&format!("{prefix}.ln1.gamma"))?, self.p(&format!("{prefix}.ln1.beta"))?);
        let ln1 = self.tape.layer_norm(res1, g1, b1, ln_eps)?;

        let hidden = self.dense(ln1, &format!("{prefix}.ffn1"), true)?;
        let hidden = self.tape.relu(hidden);
        let ffn = self.dense(hidden, &format!("{prefix}.ffn2"), true)?;
        let res2 = self.tape.add(ffn, ln1)?;
        let (g2, b2) = (self.p(&format!("{prefix}.ln2.gamma"))?, self.p(&format!("{prefix}.ln2.beta"))?);
        let out = self.tape.layer_norm(res2, g2, b2, ln_eps)?;
        Ok((out, attn))
    }
}

/// Parameter factory with a deterministic draw order.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn glorot(&mut self, path: String, fan_in: usize, fan_out: usize) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(path, &[fan_in, fan_out], limit);
    }

    pub fn uniform(&mut self, path: String, shape: &[usize], limit: f64) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-limit..limit)).collect();
        self.store.insert(path, Tensor::new(shape.to_vec(), data).expect("positive dims"), true);
    }

    pub fn constant(&mut self, path: String, len: usize, value: f64, trainable: bool) {
        self.store.insert(path, Tensor::full(&[len], value), trainable);
    }

    pub fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
        self.glorot(format!("{prefix}.weight"), fan_in, fan_out);
        if bias {
            self.constant(format!("{prefix}.bias"), fan_out, 0.0, true);
        }
    }

    fn conv_layer(&mut self, prefix: &str, c_in: usize, filters: usize) {
        self.dense(prefix, c_in, filters, true);
        self.constant(format!("{prefix}.bn.gamma"), filters, 1.0, true);
        self.constant(format!("{prefix}.bn.beta"), filters, 0.0, true);
        self.constant(format!("{prefix}.bn.running_mean"), filters, 0.0, false);
        self.constant(format!("{prefix}.bn.running_var"), filters, 1.0, false);
    }

    pub fn residual_conv(&mut self, prefix: &str, c_in: usize, filters: usize) {
        self.conv_layer(&format!("{prefix}.l1"), c_in, filters);
        self.conv_layer(&format!("{prefix}.l2"), filters, filters);
        self.dense(&format!("{prefix}.skip"), c_in, filters, true);
    }

    pub fn encoder_layer(&mut self, prefix: &str, d: usize, ffn: usize) {
        for w in ["wq", "wk", "wv", "wo"] {
            self.dense(&format!("{prefix}.{w}"), d, d, false);
        }
        self.constant(format!("{prefix}.ln1.gamma"), d, 1.0, true);
        self.constant(format!("{prefix}.ln1.beta"), d, 0.0, true);
        self.dense(&format!("{prefix}.ffn1"), d, ffn, true);
        self.dense(&format!("{prefix}.ffn2"), ffn, d, true);
        self.constant(format!("{prefix}.ln2.gamma"), d, 1.0, true);
        self.constant(format!("{prefix}.ln2.beta"), d, 0.0, true);
    }
}
