use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// A trainable tensor and its most recent gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named parameters plus non-trainable buffers (batch-norm running
/// statistics). Both maps iterate in lexicographic path order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a trainable parameter. Paths must be unique.
    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) || self.buffers.contains_key(&path) {
            return Err(Error::Config(format!("duplicate parameter path `{path}`")));
        }
        self.params.insert(path, Param { value, grad: None });
        Ok(())
    }

    pub fn insert_buffer(&mut self, path: impl Into<String>, value: Tensor) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) || self.buffers.contains_key(&path) {
            return Err(Error::Config(format!("duplicate buffer path `{path}`")));
        }
        self.buffers.insert(path, value);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Param> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Param> {
        self.params.get_mut(path)
    }

    pub fn value(&self, path: &str) -> Result<&Tensor> {
        self.params
            .get(path)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Param(format!("unknown parameter `{path}`")))
    }

    pub fn value_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(path)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Param(format!("unknown parameter `{path}`")))
    }

    pub fn buffer(&self, path: &str) -> Result<&Tensor> {
        self.buffers
            .get(path)
            .ok_or_else(|| Error::Param(format!("unknown buffer `{path}`")))
    }

    pub fn buffer_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(path)
            .ok_or_else(|| Error::Param(format!("unknown buffer `{path}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Scalar parameters under a path prefix.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// L2 norm over all present gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_paths_are_rejected() {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a.weight", Tensor::zeros(&[2])).is_err());
        assert!(s.insert_buffer("a.weight", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn iteration_is_lexicographic() {
        let mut s = ParamStore::new();
        for p in ["z", "a.b", "a", "m.x"] {
            s.insert(p, Tensor::zeros(&[1])).unwrap();
        }
        let paths: Vec<_> = s.paths().collect();
        assert_eq!(paths, ["a", "a.b", "m.x", "z"]);
    }
}
