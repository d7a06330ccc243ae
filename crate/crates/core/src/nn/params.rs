use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named model tensors in registration order. Batch-norm running statistics
/// live here too, flagged as not trainable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Model(format!("parameter {name:?} registered twice")));
        }
        self.entries.insert(name, ParamEntry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Model(format!("missing parameter {name:?}")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::Model(format!("missing parameter {name:?}")))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn entry_at(&self, index: usize) -> Option<(&str, &ParamEntry)> {
        self.entries.get_index(index).map(|(k, v)| (k.as_str(), v))
    }

    pub fn entry_at_mut(&mut self, index: usize) -> Option<(&str, &mut ParamEntry)> {
        self.entries.get_index_mut(index).map(|(k, v)| (k.as_str(), v))
    }

    /// Sum of element counts over trainable entries.
    pub fn count_parameters(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_only_trainable() {
        let mut s = ParameterStore::new();
        assert_eq!(s.count_parameters(), 0);
        s.insert("fc.weight", Tensor::zeros(&[512, 7]), true).unwrap();
        s.insert("fc.bias", Tensor::zeros(&[7]), true).unwrap();
        s.insert("bn.running_mean", Tensor::zeros(&[7]), false).unwrap();
        assert_eq!(s.count_parameters(), 3591);
    }

    #[test]
    fn rejects_duplicates() {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::zeros(&[1]), true).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1]), true).is_err());
        assert!(s.tensor("b").is_err());
    }
}
