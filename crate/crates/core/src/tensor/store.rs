use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) struct Param {
    pub(crate) name: String,
    pub(crate) value: Tensor,
    pub(crate) grad: Vec<f64>,
    pub(crate) first_moment: Vec<f64>,
    pub(crate) second_moment: Vec<f64>,
    /// Buffers (e.g. running statistics) are stored and checkpointed but never optimized.
    pub(crate) buffer: bool,
    pub(crate) frozen: bool,
}

/// Named parameters with their gradients and Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub(crate) params: Vec<Param>,
    index: HashMap<String, usize>,
    pub(crate) step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, buffer: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let n = value.len();
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: vec![0.0; n],
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            buffer,
            frozen: false,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Mutable access to the values; the shape stays fixed.
    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.params[id.0].value.data_mut()
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn is_buffer(&self, id: ParamId) -> bool {
        self.params[id.0].buffer
    }

    /// Whether the optimizer updates this entry.
    pub fn is_trainable(&self, id: ParamId) -> bool {
        let p = &self.params[id.0];
        !p.buffer && !p.frozen
    }

    /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        for (g, d) in p.grad.iter_mut().zip(grad) {
            *g += d;
        }
    }

    /// Replaces a value wholesale; the new tensor must keep the original shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn num_trainable_values(&self) -> usize {
        self.params.iter().filter(|p| !p.buffer).map(|p| p.value.len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| !p.buffer && !p.frozen)
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales trainable gradients so their joint norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in self.params.iter_mut().filter(|p| !p.buffer && !p.frozen) {
                p.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }
}
