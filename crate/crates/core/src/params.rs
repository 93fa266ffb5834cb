//! Learnable parameters, non-learnable buffers, and their initialisation.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a non-learnable tensor (batch-norm running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// A tensor paired with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Named collection of parameters and buffers owned by one model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<(String, Parameter<T>)>,
    buffers: Vec<(String, Tensor<T>)>,
    by_name: HashMap<String, ParamId>,
    buffer_by_name: HashMap<String, BufferId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            by_name: HashMap::new(),
            buffer_by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name) && !self.buffer_by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push((name, Parameter::new(value)));
        id
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name) && !self.buffer_by_name.contains_key(&name),
            "duplicate buffer name {name}"
        );
        let id = BufferId(self.buffers.len());
        self.buffer_by_name.insert(name.clone(), id);
        self.buffers.push((name, value));
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0].1
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].1.value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<T>)> {
        self.params.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter<T>)> {
        self.params.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(n, b)| (n.as_str(), b))
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.buffers.iter_mut().map(|(n, b)| (n.as_str(), b))
    }

    /// Total number of learnable scalars. Buffers are excluded.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|(_, p)| p.zero_grad());
    }

    /// Converts every parameter and buffer to another precision. Gradients reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(n, p)| (n.clone(), Parameter::new(p.value.cast())))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(n, b)| (n.clone(), b.cast()))
                .collect(),
            by_name: self.by_name.clone(),
            buffer_by_name: self.buffer_by_name.clone(),
        }
    }

    /// Overwrites values (parameters then buffers) from named tensors; every
    /// name and shape must line up exactly.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        let expected = self.params.len() + self.buffers.len();
        if tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} tensors, found {}",
                tensors.len()
            )));
        }
        let slots = self
            .params
            .iter_mut()
            .map(|(n, p)| (n.as_str(), &mut p.value))
            .chain(self.buffers.iter_mut().map(|(n, b)| (n.as_str(), b)));
        for ((name, dst), (src_name, src)) in slots.zip(tensors) {
            if name != src_name {
                return Err(Error::Checkpoint(format!(
                    "tensor name mismatch: model has `{name}`, checkpoint has `{src_name}`"
                )));
            }
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        self.zero_grads();
        Ok(())
    }

    /// Parameters then buffers, in registration order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|(n, p)| (n.clone(), p.value.clone()))
            .chain(self.buffers.iter().map(|(n, b)| (n.clone(), b.clone())))
            .collect()
    }
}

/// Uniform Glorot initialisation for a `fan_in × fan_out` weight.
pub fn glorot_uniform<T: Real, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::lit(rng.random_range(-limit..limit)))
        .collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}
