use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Trainable weights are updated by the optimizer; buffers (normalization
/// running statistics) are updated by training-mode forward passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry<T> {
    path: String,
    kind: ParamKind,
    value: Tensor<T>,
}

/// Flat, path-keyed collection of every array a model owns.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, path: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let path = path.into();
        assert!(!self.index.contains_key(&path), "duplicate parameter path {path}");
        let id = self.entries.len();
        self.index.insert(path.clone(), id);
        self.entries.push(Entry { path, kind, value });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn path(&self, id: ParamId) -> &str {
        &self.entries[id.0].path
    }

    pub fn id_of(&self, path: &str) -> Option<ParamId> {
        self.index.get(path).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.kind(id) == ParamKind::Trainable)
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Trainable).map(|e| e.value.len()).sum()
    }

    pub fn paths(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.path.as_str()).collect()
    }

    /// Overwrites a value in place; the shape must be unchanged.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(invalid!(
                "parameter {} has shape {:?}, got {:?}",
                entry.path,
                entry.value.shape(),
                value.shape()
            ));
        }
        entry.value = value;
        Ok(())
    }
}

pub(crate) fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::cast(dist.sample(rng)))
}

/// He-normal initialization for a layer with the given fan-in.
pub(crate) fn kaiming<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Glorot-uniform initialization.
pub(crate) fn xavier<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::cast(rng.random_range(-bound..bound)))
}
