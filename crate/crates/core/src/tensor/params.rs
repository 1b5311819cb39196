use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A named learnable tensor and its gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub requires_grad: bool,
}

/// Ordered parameter collection plus named non-learnable buffers
/// (batch-norm running statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    index: HashMap<String, usize>,
    buffers: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            buffers: Vec::new(),
        }
    }

    /// Registers a parameter and returns its index.
    pub fn add(&mut self, name: &str, value: Tensor<S>) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_owned(),
            value,
            grad,
            requires_grad: true,
        });
        self.index.insert(name.to_owned(), self.params.len() - 1);
        self.params.len() - 1
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<S>) -> usize {
        self.buffers.push((name.to_owned(), value));
        self.buffers.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Parameter<S> {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Parameter<S> {
        &mut self.params[index]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter<S>> {
        self.find(name)
            .map(|i| &self.params[i])
            .ok_or_else(|| Error::NotFound(format!("parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn buffer(&self, index: usize) -> &Tensor<S> {
        &self.buffers[index].1
    }

    pub fn buffer_mut(&mut self, index: usize) -> &mut Tensor<S> {
        &mut self.buffers[index].1
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.buffers.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(S::zero());
        }
    }

    /// Number of learnable scalars in parameters whose name satisfies `filter`.
    pub fn count(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| filter(&p.name))
            .map(|p| p.value.numel())
            .sum()
    }
}
