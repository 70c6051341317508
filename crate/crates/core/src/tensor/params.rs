use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.tensors[id.0] = tensor;
            return id;
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bitwise_eq(&self, other: &ParamSet<T>) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(&x, &y)| Scalar::to_f64(x).to_bits() == Scalar::to_f64(y).to_bits())
            })
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub(crate) fn new(n: usize) -> Self {
        Gradients {
            grads: vec![None; n],
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, shape: &[usize], grad: &[T]) {
        let slot = &mut self.grads[id.0];
        match slot {
            Some(t) => {
                for (a, &g) in t.data_mut().iter_mut().zip(grad) {
                    *a = *a + g;
                }
            }
            None => *slot = Some(Tensor::from_vec(shape, grad.to_vec()).unwrap()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    /// Adds `other` into `self` (matching parameter sets).
    pub fn merge(&mut self, other: &Gradients<T>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g.shape(), g.data());
            }
        }
    }
}
