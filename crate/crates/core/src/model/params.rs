use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named trainable tensors and their gradients, keyed by stable dotted paths
/// such as `block.3.attn.wq`. Iteration order is sorted by path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T> {
    values: BTreeMap<String, Tensor<T>>,
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            values: BTreeMap::new(),
            grads: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor<T>) {
        let path = path.into();
        self.grads.insert(path.clone(), Tensor::zeros(value.shape()));
        self.values.insert(path, value);
    }

    pub fn contains(&self, path: &str) -> bool {
        self.values.contains_key(path)
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<T>> {
        self.values
            .get(path)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{path}`")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        self.values
            .get_mut(path)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{path}`")))
    }

    pub fn grad(&self, path: &str) -> Result<&Tensor<T>> {
        self.grads
            .get(path)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{path}`")))
    }

    pub fn grad_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        self.grads
            .get_mut(path)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{path}`")))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }

    pub fn values(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.values
    }

    pub fn grads(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.grads
    }

    /// Values for reading and gradients for writing at the same time.
    pub fn split_mut(&mut self) -> (&BTreeMap<String, Tensor<T>>, &mut BTreeMap<String, Tensor<T>>) {
        (&self.values, &mut self.grads)
    }

    /// Values and gradients, both mutable (used by optimizers).
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>, &mut Tensor<T>)> {
        self.values
            .iter_mut()
            .zip(self.grads.values_mut())
            .map(|((k, v), g)| (k.as_str(), v, g))
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Global L2 norm over all gradients, summed in path order.
    pub fn grad_norm(&self) -> T {
        self.grads
            .values()
            .fold(T::zero(), |acc, g| acc + g.sum_sq())
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.values().all(Tensor::is_finite)
    }

    /// Convert to another precision; gradients are reset.
    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        let mut out = ParameterStore::new();
        for (k, v) in &self.values {
            let data = v.data().iter().map(|x| U::of(x.as_f64())).collect();
            out.insert(k.clone(), Tensor::new(v.shape().to_vec(), data).unwrap());
        }
        out
    }
}
