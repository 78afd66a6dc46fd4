use indexmap::IndexMap;

use crate::{Result, Tensor, TensorError};

/// Gradients keyed by parameter name.
pub type GradMap = IndexMap<String, Tensor>;

/// Ordered map from parameter name to tensor. Iteration follows insertion
/// order, which model constructors keep equal to depth order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterTree {
    entries: IndexMap<String, Tensor>,
}

impl ParameterTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Replaces an existing entry in place, keeping its position.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Option<Tensor> {
        self.entries
            .get_mut(name)
            .map(|slot| std::mem::replace(slot, tensor))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
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

    /// Total scalar count.
    pub fn num_params(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Entries whose name satisfies `keep`, in tree order.
    pub fn filter(&self, mut keep: impl FnMut(&str) -> bool) -> ParameterTree {
        ParameterTree {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Appends every entry of `other`; names must not collide.
    pub fn extend(&mut self, other: ParameterTree) -> Result<()> {
        for (k, v) in other.entries {
            self.insert(k, v)?;
        }
        Ok(())
    }

    /// Bitwise equality of names, order, shapes and values.
    pub fn bit_eq(&self, other: &ParameterTree) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }
}

impl FromIterator<(String, Tensor)> for ParameterTree {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParameterTree {
            entries: iter.into_iter().collect(),
        }
    }
}

impl IntoIterator for ParameterTree {
    type Item = (String, Tensor);
    type IntoIter = indexmap::map::IntoIter<String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.into_iter()
    }
}

impl std::ops::Index<&str> for ParameterTree {
    type Output = Tensor;

    /// Panics when `name` is absent.
    fn index(&self, name: &str) -> &Tensor {
        self.get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }
}
