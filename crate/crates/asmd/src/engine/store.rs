//! Named parameter partitions with freeze flags and SGD.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::tensor::Tensor;
use super::EngineError;

/// Address of one tensor inside a store: (partition name, tensor index).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub partition: String,
    pub index: usize,
}

impl ParamKey {
    pub fn new(partition: &str, index: usize) -> Self {
        Self {
            partition: partition.to_string(),
            index,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub tensors: Vec<Tensor>,
    pub frozen: bool,
}

/// All trainable state of a model. Iteration order over partitions is the
/// lexicographic name order, which keeps every consumer deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    partitions: BTreeMap<String, Partition>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_partition(&mut self, name: &str, tensors: Vec<Tensor>) -> Result<(), EngineError> {
        if self.partitions.contains_key(name) {
            return Err(EngineError::DuplicatePartition(name.to_string()));
        }
        self.partitions.insert(
            name.to_string(),
            Partition {
                tensors,
                frozen: false,
            },
        );
        Ok(())
    }

    /// Replaces an existing partition (or inserts if absent), resetting the
    /// freeze flag.
    pub fn replace_partition(&mut self, name: &str, tensors: Vec<Tensor>) {
        self.partitions.insert(
            name.to_string(),
            Partition {
                tensors,
                frozen: false,
            },
        );
    }

    pub fn remove_partition(&mut self, name: &str) -> Option<Partition> {
        self.partitions.remove(name)
    }

    pub fn partition(&self, name: &str) -> Result<&Partition, EngineError> {
        self.partitions
            .get(name)
            .ok_or_else(|| EngineError::UnknownPartition(name.to_string()))
    }

    pub fn has_partition(&self, name: &str) -> bool {
        self.partitions.contains_key(name)
    }

    pub fn tensor(&self, name: &str, index: usize) -> Result<&Tensor, EngineError> {
        self.partition(name)?
            .tensors
            .get(index)
            .ok_or_else(|| EngineError::UnknownTensor {
                partition: name.to_string(),
                index,
            })
    }

    pub fn tensor_mut(&mut self, name: &str, index: usize) -> Result<&mut Tensor, EngineError> {
        let p = self
            .partitions
            .get_mut(name)
            .ok_or_else(|| EngineError::UnknownPartition(name.to_string()))?;
        p.tensors.get_mut(index).ok_or_else(|| EngineError::UnknownTensor {
            partition: name.to_string(),
            index,
        })
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<(), EngineError> {
        self.partitions
            .get_mut(name)
            .ok_or_else(|| EngineError::UnknownPartition(name.to_string()))?
            .frozen = frozen;
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.partitions.get(name).map_or(false, |p| p.frozen)
    }

    /// Partition names in deterministic (lexicographic) order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.partitions.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Partition)> {
        self.partitions.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn partition_count(&self) -> usize {
        self.partitions.len()
    }

    pub fn total_params(&self) -> usize {
        self.partitions
            .values()
            .flat_map(|p| p.tensors.iter())
            .map(|t| t.numel())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.partitions
            .values()
            .flat_map(|p| p.tensors.iter())
            .all(|t| t.all_finite())
    }

    /// Plain SGD: p -= lr * g for every entry in the gradient map. Shapes are
    /// validated against the store; partitions absent from the map are left
    /// bit-identical. Freezing is enforced upstream (frozen partitions enter
    /// the graph as plain inputs and never appear in the map), but a gradient
    /// addressed at a frozen partition is rejected here as a logic error.
    pub fn sgd_step(&mut self, grads: &Gradients, lrs: &LrSchedule) -> Result<(), EngineError> {
        for (key, g) in grads.params() {
            let lr = lrs
                .rate_for(key)
                .ok_or_else(|| EngineError::MissingLearningRate(key.partition.clone()))?;
            let p = self
                .partitions
                .get_mut(&key.partition)
                .ok_or_else(|| EngineError::UnknownPartition(key.partition.clone()))?;
            if p.frozen {
                return Err(EngineError::BadArgument {
                    op: "sgd_step",
                    msg: format!("gradient addressed at frozen partition '{}'", key.partition),
                });
            }
            let t = p
                .tensors
                .get_mut(key.index)
                .ok_or_else(|| EngineError::UnknownTensor {
                    partition: key.partition.clone(),
                    index: key.index,
                })?;
            if t.shape() != g.shape() {
                return Err(EngineError::GradShapeMismatch {
                    partition: key.partition.clone(),
                    index: key.index,
                    got: g.shape().to_vec(),
                    want: t.shape().to_vec(),
                });
            }
            for (pv, gv) in t.data_mut().iter_mut().zip(g.iter()) {
                *pv -= lr * gv;
            }
        }
        Ok(())
    }
}

/// Learning rates by partition, with optional per-tensor overrides (used by
/// the tracker head, whose hidden and output layers train at different
/// rates).
#[derive(Clone, Debug, Default)]
pub struct LrSchedule {
    by_partition: BTreeMap<String, f64>,
    by_tensor: BTreeMap<ParamKey, f64>,
}

impl LrSchedule {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, partition: &str, lr: f64) -> Result<&mut Self, EngineError> {
        if !(lr > 0.0) {
            return Err(EngineError::BadLearningRate(partition.to_string(), lr));
        }
        self.by_partition.insert(partition.to_string(), lr);
        Ok(self)
    }

    pub fn set_tensor(
        &mut self,
        partition: &str,
        index: usize,
        lr: f64,
    ) -> Result<&mut Self, EngineError> {
        if !(lr > 0.0) {
            return Err(EngineError::BadLearningRate(partition.to_string(), lr));
        }
        self.by_tensor.insert(ParamKey::new(partition, index), lr);
        Ok(self)
    }

    pub fn rate_for(&self, key: &ParamKey) -> Option<f64> {
        self.by_tensor
            .get(key)
            .or_else(|| self.by_partition.get(&key.partition))
            .copied()
    }
}
