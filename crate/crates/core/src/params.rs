//! Named parameter storage and gradient buffers.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub type ParamId = usize;

/// Parameters addressed by canonical dotted names (`module.layer.sublayer.tensor`).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Matrix<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Matrix<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix<T>> {
        self.id(name).map(|id| &self.tensors[id])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.id(name).map(move |id| &mut self.tensors[id])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (i, n.as_str(), t))
    }

    /// Total scalar count, optionally restricted to names with a given prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.len())
            .sum()
    }

    /// SHA-256 over names, shapes and the `f64` bit patterns of every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (_, name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for &x in t.as_slice() {
                h.update(x.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Per-parameter gradient accumulators, aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new(n_params: usize) -> Self {
        Self {
            grads: vec![None; n_params],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Matrix<T>) {
        match &mut self.grads[id] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.grads[id].as_ref()
    }

    pub fn merge(&mut self, other: &Gradients<T>) {
        for (id, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(id, g);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
