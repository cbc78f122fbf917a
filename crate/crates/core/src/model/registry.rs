//! Flat, ordered storage for trainable parameters and batch-norm running
//! statistics. Registry order is the canonical order for checkpoints,
//! optimizer state, and gradient reads.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::graph::BnBatchStats;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamRegistry<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamRegistry<S> {
    pub fn new() -> Self {
        ParamRegistry { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Overwrites values by name; shapes must match and every name must
    /// exist — used when loading checkpoints into a freshly built structure.
    pub fn load_values(&mut self, entries: &[(String, Tensor<S>)], origin: &str) -> Result<()> {
        if entries.len() != self.tensors.len() {
            return Err(Error::CorruptCheckpoint {
                path: origin.to_string(),
                detail: format!("expected {} parameters, file has {}", self.tensors.len(), entries.len()),
            });
        }
        for (name, t) in entries {
            let id = self.find(name).ok_or_else(|| Error::CorruptCheckpoint {
                path: origin.to_string(),
                detail: format!("unknown parameter {name:?}"),
            })?;
            if self.tensors[id.0].shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name:?} has shape {:?} in file but {:?} in the configured architecture",
                    t.shape(),
                    self.tensors[id.0].shape()
                )));
            }
            self.tensors[id.0] = t.clone();
        }
        Ok(())
    }
}

impl<S: Scalar> Default for ParamRegistry<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<S: Scalar> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

/// Running statistics for every batch-norm layer, updated by exponential
/// moving average after each training step.
#[derive(Debug, Clone)]
pub struct BnStore<S: Scalar> {
    slots: Vec<RunningStats<S>>,
}

impl<S: Scalar> BnStore<S> {
    pub fn new() -> Self {
        BnStore { slots: Vec::new() }
    }

    pub fn add(&mut self, channels: usize) -> BnId {
        self.slots.push(RunningStats {
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
        });
        BnId(self.slots.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, id: BnId) -> &RunningStats<S> {
        &self.slots[id.0]
    }

    pub fn slots(&self) -> &[RunningStats<S>] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [RunningStats<S>] {
        &mut self.slots
    }

    /// running <- (1 - momentum) * running + momentum * batch
    pub fn apply_updates(&mut self, updates: &[(BnId, BnBatchStats<S>)], momentum: f64) {
        let m = S::from_f64(momentum);
        let keep = S::one() - m;
        for (id, stats) in updates {
            let slot = &mut self.slots[id.0];
            for (r, b) in slot.mean.iter_mut().zip(&stats.mean) {
                *r = keep * *r + m * *b;
            }
            for (r, b) in slot.var.iter_mut().zip(&stats.var) {
                *r = keep * *r + m * *b;
            }
        }
    }
}

impl<S: Scalar> Default for BnStore<S> {
    fn default() -> Self {
        Self::new()
    }
}
