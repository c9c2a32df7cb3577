use indexmap::IndexMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named tensors in insertion order, each flagged frozen or trainable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: IndexMap<String, Entry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, Entry { value, trainable });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entry(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        self.entry(name).map(|e| e.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|e| e.trainable = trainable)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in self.entries.values_mut() {
            e.trainable = trainable;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries, optionally restricted to trainable tensors.
    pub fn count(&self, trainable_only: bool) -> usize {
        self.entries
            .values()
            .filter(|e| !trainable_only || e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Replaces values of every tensor named in `other`. Shapes must match.
    pub fn assign_from(&mut self, other: &ParameterStore) -> Result<()> {
        for (name, e) in other.iter() {
            let dst = self.get_mut(name)?;
            if dst.shape() != e.value.shape() {
                return Err(Error::shape(
                    "assign",
                    format!("`{name}`: {:?} vs {:?}", dst.shape(), e.value.shape()),
                ));
            }
            *dst = e.value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_and_counts() {
        let mut s = ParameterStore::new();
        s.insert("b", Tensor::zeros(&[2, 3]), true).unwrap();
        s.insert("a", Tensor::zeros(&[4]), false).unwrap();
        assert_eq!(s.names().collect::<Vec<_>>(), ["b", "a"]);
        assert_eq!(s.count(false), 10);
        assert_eq!(s.count(true), 6);
        assert!(s.insert("a", Tensor::zeros(&[1]), true).is_err());
    }

    #[test]
    fn empty_store_counts_zero() {
        assert_eq!(ParameterStore::new().count(false), 0);
    }
}
