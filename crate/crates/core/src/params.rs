use std::collections::HashMap;

use crate::error::{LiftError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a learnable tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
///
/// Registration order is part of the model layout: two stores built from the
/// same config hold the same names in the same positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(LiftError::StructureMismatch(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&mut self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Checks that `other` has the same names, order and shapes.
    pub fn check_same_structure(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(LiftError::StructureMismatch(format!(
                "{} tensors vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(LiftError::StructureMismatch(format!(
                    "`{na}` {:?} vs `{nb}` {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Copy of the values with all gradient accumulators dropped.
    pub fn snapshot(&self) -> Self {
        let mut out = self.clone();
        out.clear_grads();
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(store.insert("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn structure_check_names_shapes() {
        let mut a = ParamStore::<f32>::new();
        a.insert("w", Tensor::zeros(&[2, 2])).unwrap();
        let mut b = ParamStore::<f32>::new();
        b.insert("w", Tensor::zeros(&[4])).unwrap();
        assert!(a.check_same_structure(&b).is_err());
        assert!(a.check_same_structure(&a.clone()).is_ok());
    }
}
