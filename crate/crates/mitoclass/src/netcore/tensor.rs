//! Dense f64 tensors and ordered, name-addressed tensor collections.

use std::collections::HashMap;

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "tensor dims {dims:?} do not match data length {}",
            data.len()
        );
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// An ordered collection of named tensors. Iteration order is insertion
/// order, which makes serialization and gradient reduction deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorMap {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl TensorMap {
    pub fn new() -> Self {
        TensorMap::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(
            self.index
                .insert(name.to_string(), self.tensors.len())
                .is_none(),
            "duplicate tensor name '{name}'"
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.tensors[i])
    }

    /// Mutable access to two distinct tensors at once.
    pub fn get_two_mut(&mut self, a: &str, b: &str) -> Option<(&mut Tensor, &mut Tensor)> {
        let ia = *self.index.get(a)?;
        let ib = *self.index.get(b)?;
        assert_ne!(ia, ib, "get_two_mut requires distinct tensors");
        if ia < ib {
            let (left, right) = self.tensors.split_at_mut(ib);
            Some((&mut left[ia], &mut right[0]))
        } else {
            let (left, right) = self.tensors.split_at_mut(ia);
            Some((&mut right[0], &mut left[ib]))
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    /// Same names and shapes, zero-filled.
    pub fn zeros_like(&self) -> TensorMap {
        let mut out = TensorMap::new();
        for (name, t) in self.iter() {
            out.insert(name, Tensor::zeros(t.dims()));
        }
        out
    }

    /// Shapes (name, dims) in insertion order.
    pub fn specs(&self) -> Vec<(String, Vec<usize>)> {
        self.iter()
            .map(|(n, t)| (n.to_string(), t.dims().to_vec()))
            .collect()
    }

    /// Element-wise accumulate `other` into `self`; shapes must agree.
    pub fn add_assign(&mut self, other: &TensorMap) {
        assert_eq!(self.len(), other.len(), "tensor map arity mismatch");
        for ((an, a), (bn, b)) in self.iter_mut().zip(other.iter()) {
            assert_eq!(an, bn, "tensor name mismatch");
            debug_assert_eq!(a.dims(), b.dims());
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += *y;
            }
        }
    }
}
