use std::collections::{BTreeMap, BTreeSet};

use crate::float::Float;
use crate::tensor::Tensor;

/// Named parameters of one or more modules. Iteration order is the
/// lexicographic name order, which keeps serialization deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    params: BTreeMap<String, Tensor<F>>,
    frozen: BTreeSet<String>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new(), frozen: BTreeSet::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) {
        let name = name.into();
        self.frozen.remove(&name);
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.params.get_mut(name)
    }

    /// Panicking lookup for module code where a missing name is a bug.
    pub fn expect(&self, name: &str) -> &Tensor<F> {
        self.params.get(name).unwrap_or_else(|| panic!("parameter `{name}` is not registered"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.contains_key(name) && !self.frozen.contains(name)
    }

    pub fn freeze_all(&mut self) {
        self.frozen = self.params.keys().cloned().collect();
    }

    pub fn freeze(&mut self, name: &str) {
        if self.params.contains_key(name) {
            self.frozen.insert(name.to_string());
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.keys().filter(|n| !self.frozen.contains(*n)).cloned().collect()
    }

    /// Moves every parameter of `other` into `self`.
    pub fn merge(&mut self, other: ParamStore<F>) {
        for (k, v) in other.params {
            self.params.insert(k.clone(), v);
            if other.frozen.contains(&k) {
                self.frozen.insert(k);
            }
        }
    }

    /// Parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<F> {
        let params: BTreeMap<_, _> = self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let frozen = self.frozen.iter().filter(|k| params.contains_key(*k)).cloned().collect();
        ParamStore { params, frozen }
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            frozen: self.frozen.clone(),
        }
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_topology(&self, other: &ParamStore<F>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }
}
