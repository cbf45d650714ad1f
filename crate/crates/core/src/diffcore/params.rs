use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{DiffError, Graph, Var};
use crate::tensor::{Real, Tensor};

/// Ordered, uniquely named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore<T = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<usize, DiffError> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        self.entries.push((name.to_string(), value));
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Replaces the values of an existing entry; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<(), DiffError> {
        let slot = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| DiffError::InvalidArgument { op: "parameter", detail: name.to_string() })?;
        if slot.1.shape() != value.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "parameter",
                shapes: alloc::vec![slot.1.shape().to_vec(), value.shape().to_vec()],
            });
        }
        slot.1 = value;
        Ok(())
    }

    /// Registers every tensor as a parameter leaf, in store order.
    pub fn bind(&self, graph: &mut Graph<T>) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| graph.param(t.clone())).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Concatenated little-endian payload bytes of all tensors.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.entries.iter().flat_map(|(_, t)| t.to_le_bytes()).collect()
    }
}
