//! Named parameter registry shared by all learnable modules.
//!
//! Parameters live outside the tape; a forward pass copies them onto the
//! tape as leaves under their registered name. Iteration order is insertion
//! order, which keeps optimizer updates and serialization deterministic.

use std::collections::HashMap;

use super::tensor::{Element, Tensor};

#[derive(Clone)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>, bool)>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    /// Register a trainable parameter. Panics on duplicate names.
    pub fn register(&mut self, name: &str, tensor: Tensor<T>) {
        self.register_with(name, tensor, true)
    }

    pub fn register_with(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name:?}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor, trainable));
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        &mut self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// (name, tensor, trainable) in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, bool)> {
        self.entries.iter().map(|(n, t, tr)| (n.as_str(), t, *tr))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>, bool)> {
        self.entries.iter_mut().map(|(n, t, tr)| (n.as_str(), t, *tr))
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t, _)| t.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, t, tr) in self.iter() {
            out.register_with(name, t.cast(), tr);
        }
        out
    }
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradients produced by a backward pass, keyed by name.
pub struct Gradients<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Element> Gradients<T> {
    pub(crate) fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Self {
        let index = entries.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Self { entries, index }
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("no gradient for {name:?}"));
        &self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Accumulate another gradient set (same names) into this one.
    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (name, t) in &mut self.entries {
            let o = other.get(name);
            assert_eq!(t.shape(), o.shape(), "gradient shape mismatch for {name}");
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a = a.add(*b);
            }
        }
    }

    /// Scale all gradients in place (used for minibatch averaging).
    pub fn scale(&mut self, s: T) {
        for (_, t) in &mut self.entries {
            for v in t.data_mut() {
                *v = v.mul(s);
            }
        }
    }
}
