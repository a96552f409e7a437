use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which sub-network a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Gcn,
    Vae,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub branch: Branch,
    /// Running batch-norm statistics are stored here too, but are not trained.
    pub trainable: bool,
}

/// Flat, ordered list of every tensor a model owns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub(crate) fn push(&mut self, name: String, value: Tensor, branch: Branch, trainable: bool) -> usize {
        self.entries.push(ParamEntry { name, value, branch, trainable });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.entries[idx].value
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].value
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Indices of trainable tensors, in store order.
    pub fn trainable(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().enumerate().filter(|(_, e)| e.trainable).map(|(i, _)| i)
    }

    /// Mutable trainable tensors, in the same order as [`ParamStore::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.entries.iter_mut().filter(|e| e.trainable).map(|e| &mut e.value).collect()
    }

    /// Total element count of trainable tensors.
    pub fn trainable_elements(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn trainable_elements_in(&self, branch: Branch) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.branch == branch)
            .map(|e| e.value.len())
            .sum()
    }

    /// Replaces the value at `idx`, keeping its shape.
    pub fn set(&mut self, idx: usize, value: Tensor) -> Result<()> {
        let e = &mut self.entries[idx];
        if e.value.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("{}: {:?} vs {:?}", e.name, e.value.shape(), value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }
}
