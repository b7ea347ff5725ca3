//! Named parameter storage with accumulated gradients.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// All learnable tensors of a model, addressed by unique string paths such
/// as `"psi_g.layer0.weight"`. Iteration order is insertion order, which
/// makes optimizer sweeps and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidInput(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].grad)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub fn add_grad(&mut self, name: &str, delta: &Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name:?}")))?;
        let e = &mut self.entries[i];
        if e.grad.shape() != delta.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} does not match parameter {name:?} shape {:?}",
                delta.shape(),
                e.grad.shape()
            )));
        }
        for (g, d) in e.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
        Ok(())
    }

    /// `(name, value, grad)` triples in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), &e.value, &e.grad))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Value and gradient slices of the entry at insertion position `i`,
    /// for optimizer updates.
    pub fn entry_mut(&mut self, i: usize) -> (&str, &mut [f64], &[f64]) {
        let e = &mut self.entries[i];
        (e.name.as_str(), e.value.data_mut(), e.grad.data())
    }

    pub fn total_numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}
