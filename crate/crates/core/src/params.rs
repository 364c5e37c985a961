//! Ordered, named parameter sets shared by the models and the optimizer.
//!
//! Iteration order is insertion order and is the contract for checkpoint
//! layout and optimizer state alignment: tensors are initialized, saved,
//! loaded, and updated in exactly this order.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.tensors[self.index[name]]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter_mut())
    }

    pub fn validate_finite(&self, context: &str) -> Result<()> {
        for (name, t) in self.iter() {
            t.validate_finite(&format!("{context}.{name}"))?;
        }
        Ok(())
    }

    /// Registers every tensor on the tape. `trainable` false binds frozen
    /// copies so backward skips parameter gradients entirely.
    pub fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> Bound<'a> {
        let ids = self
            .tensors
            .iter()
            .map(|t| tape.leaf_from(t.shape().to_vec(), t.data().to_vec(), trainable))
            .collect();
        Bound { set: self, ids }
    }

    /// He-normal conv weight: std = sqrt(2 / fan_in).
    pub fn insert_conv(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, rng: &mut Rng) {
        let std = (2.0 / fan_in as f32).sqrt();
        self.insert(name, Tensor::rand_normal(shape, std, rng));
    }

    pub fn insert_zeros(&mut self, name: &str, shape: Vec<usize>) {
        self.insert(name, Tensor::zeros(shape));
    }
}

/// A ParamSet registered on a tape: maps names to tape value ids.
pub struct Bound<'a> {
    set: &'a ParamSet,
    ids: Vec<ValueId>,
}

impl<'a> Bound<'a> {
    pub fn id(&self, name: &str) -> ValueId {
        self.ids[self.set.index[name]]
    }

    pub fn ids(&self) -> &[ValueId] {
        &self.ids
    }

    pub fn set(&self) -> &'a ParamSet {
        self.set
    }

    /// Reads accumulated leaf gradients back out of the tape in parameter
    /// order, erroring on any non-finite gradient with the parameter's name.
    pub fn grads(&self, tape: &Tape) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(self.ids.len());
        for (name, id) in self.set.names.iter().zip(&self.ids) {
            let g = tape
                .grad(*id)
                .ok_or_else(|| Error::config(format!("no gradient recorded for parameter {name}")))?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("gradient of parameter {name}")));
            }
            out.push(g.to_vec());
        }
        Ok(out)
    }
}
