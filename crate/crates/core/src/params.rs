use std::collections::HashMap;

use crate::error::{mismatch, Result};
use crate::tensor::Tensor;

/// Handle to a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named weight or buffer.
///
/// `shape` is the logical shape written to weight files (a bias is `[C]`, γ is
/// `[]`); `tensor` holds the same values under rank-4 dims suited for
/// broadcasting. Buffers such as batch-norm running statistics have
/// `trainable = false`. `frozen` parameters keep their value through optimizer
/// steps because their gradients are discarded.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub tensor: Tensor,
    pub trainable: bool,
    pub frozen: bool,
}

impl ParamTensor {
    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn receives_updates(&self) -> bool {
        self.trainable && !self.frozen
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<ParamTensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        tensor: Tensor,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(mismatch("ParamStore::add", format!("duplicate name {name}")));
        }
        if shape.iter().product::<usize>() != tensor.numel() {
            return Err(mismatch(
                "ParamStore::add",
                format!("{name}: shape {shape:?} vs tensor {:?}", tensor.dims()),
            ));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(ParamTensor {
            name,
            shape: shape.to_vec(),
            tensor,
            trainable,
            frozen: false,
        });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamTensor)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total element count of trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.numel()).sum()
    }

    pub fn total_bytes(&self) -> usize {
        self.params.iter().map(|p| p.numel() * 4).sum()
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }
}
