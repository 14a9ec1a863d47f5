use std::collections::BTreeMap;

use super::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Vec<f64>,
    /// Non-trainable entries (batch-norm running stats) are stored and
    /// checkpointed but skipped by the optimizer.
    pub trainable: bool,
}

/// Named tensors addressed by dotted path, iterated in path order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor, trainable: bool) {
        let grad = vec![0.0; value.len()];
        self.entries.insert(path.into(), Param { value, grad, trainable });
    }

    pub fn get(&self, path: &str) -> Result<&Param, TensorError> {
        self.entries.get(path).ok_or_else(|| TensorError::UnknownParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Param, TensorError> {
        self.entries.get_mut(path).ok_or_else(|| TensorError::UnknownParam(path.to_string()))
    }

    pub fn value(&self, path: &str) -> Result<&Tensor, TensorError> {
        self.get(path).map(|p| &p.value)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Places a parameter on the tape, as a differentiable leaf when it is
    /// trainable and `track` is set.
    pub fn bind(&self, tape: &mut Tape, path: &str, track: bool) -> Result<Var, TensorError> {
        let p = self.get(path)?;
        Ok(if track && p.trainable { tape.param(p.value.clone()) } else { tape.constant(p.value.clone()) })
    }

    /// Adds the tape gradient of `var` into the stored gradient of `path`.
    pub fn accumulate_grad(&mut self, path: &str, tape: &Tape, var: Var) -> Result<(), TensorError> {
        let p = self.get_mut(path)?;
        if let Some(g) = tape.grad(var) {
            for (a, v) in p.grad.iter_mut().zip(g) {
                *a += v;
            }
        }
        Ok(())
    }
}
