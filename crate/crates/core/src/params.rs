//! Named, ordered parameter storage with freeze flags.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

/// Parameters in insertion order. Names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Parameter {
            name,
            value,
            frozen: false,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.entries[i])
    }

    /// Value of a parameter that must exist.
    pub fn value(&self, name: &str) -> &Tensor {
        &self
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|p| p.name.as_str())
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let p = self
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        p.frozen = frozen;
        Ok(())
    }

    /// (total, trainable) scalar counts.
    pub fn counts(&self) -> (usize, usize) {
        self.entries.iter().fold((0, 0), |(t, tr), p| {
            let n = p.value.numel();
            (t + n, tr + if p.frozen { 0 } else { n })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected_and_order_kept() {
        let mut ps = ParameterSet::new();
        ps.insert("b", Tensor::zeros([2])).unwrap();
        ps.insert("a", Tensor::zeros([3])).unwrap();
        assert!(ps.insert("b", Tensor::zeros([1])).is_err());
        assert_eq!(ps.names().collect::<Vec<_>>(), ["b", "a"]);
    }

    #[test]
    fn counts_respect_freeze() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::zeros([2, 3])).unwrap();
        ps.insert("b", Tensor::zeros([3])).unwrap();
        assert_eq!(ps.counts(), (9, 9));
        ps.set_frozen("w", true).unwrap();
        assert_eq!(ps.counts(), (9, 3));
    }
}
