//! Named parameter collections with deterministic ordering, plus the weight
//! initializers used across the model.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// An ordered set of named tensors. Iteration follows insertion order, so
/// optimizer updates and serialization are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::invalid("params", format!("duplicate parameter name {name}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar elements across all tensors.
    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Set `requires_grad` on every parameter whose name starts with `prefix`.
    /// Returns how many parameters matched.
    pub fn set_requires_grad_prefix(&mut self, prefix: &str, requires_grad: bool) -> usize {
        let mut hits = 0;
        for (name, t) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                t.set_requires_grad(requires_grad);
                hits += 1;
            }
        }
        hits
    }
}

/// Truncated normal init: draws beyond two standard deviations are redrawn,
/// then scaled by `std`.
pub fn trunc_normal(rng: &mut RngStream, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.trunc_normal(std)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape matches generated length")
}

/// He-style init for convolution/linear weights feeding a ReLU:
/// truncated normal with std = sqrt(2 / fan_in).
pub fn he_normal(rng: &mut RngStream, shape: &[usize], fan_in: usize) -> Tensor {
    trunc_normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}
