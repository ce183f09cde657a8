use alloc::string::String;
use alloc::vec::Vec;

use super::{Real, Tensor};
use crate::error::invalid;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    LinearWeight,
    LinearBias,
    Other,
}

impl ParamKind {
    pub fn is_batch_norm(self) -> bool {
        matches!(self, Self::BnGamma | Self::BnBeta)
    }
}

/// A learnable tensor together with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub id: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Whether weight decay applies to this tensor.
    pub decayable: bool,
}

impl<T: Real> Parameter<T> {
    pub fn new(id: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            id: id.into(),
            kind,
            value,
            grad,
            decayable: true,
        }
    }
}

/// Ordered collection of parameters with unique ids.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Adds a parameter and returns its index.
    pub fn push(&mut self, param: Parameter<T>) -> Result<usize> {
        if self.params.iter().any(|p| p.id == param.id) {
            return Err(invalid!("duplicate parameter id {:?}", param.id));
        }
        self.params.push(param);
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Parameter<T> {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Parameter<T> {
        &mut self.params[index]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.params.iter().position(|p| p.id == id)
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> core::slice::IterMut<'_, Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }
}

impl<'a, T> IntoIterator for &'a ParamStore<T> {
    type Item = &'a Parameter<T>;
    type IntoIter = core::slice::Iter<'a, Parameter<T>>;

    fn into_iter(self) -> Self::IntoIter {
        self.params.iter()
    }
}
