use std::collections::BTreeMap;

use crate::tensor::{Float, Tensor};

/// Gradient tensors keyed by trainable tensor name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients<T: Float> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn new() -> Self {
        Gradients { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.map.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scale(&mut self, s: T) {
        self.map.values_mut().for_each(|t| t.scale(s));
    }
}
