use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to an entry of a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Named, insertion-ordered parameters and non-trainable statistics.
///
/// Gradients accumulate (`+=`) until [`ParamStore::zero_grads`]. Every
/// mutation of a value bumps `version`, which layer contexts use to reject
/// a backward pass against parameters that changed after the forward pass.
#[derive(Debug)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
    version: u64,
    reads: Vec<AtomicU64>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
            by_name: self.by_name.clone(),
            version: self.version,
            reads: self
                .reads
                .iter()
                .map(|r| AtomicU64::new(r.load(Ordering::Relaxed)))
                .collect(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
            version: 0,
            reads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        self.reads.push(AtomicU64::new(0));
        self.version += 1;
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Value read used by layer kernels; counted for access instrumentation.
    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        self.reads[id.0].fetch_add(1, Ordering::Relaxed);
        &self.params[id.0].value
    }

    /// Mutable value access. Invalidates outstanding layer contexts.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        self.version += 1;
        &mut self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *self.value_mut(id) = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    /// Mutable access to a non-trainable statistic (batch-norm running
    /// moments). Does not invalidate layer contexts: backward passes never
    /// read running statistics recorded during the same training step.
    pub(crate) fn stat_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        debug_assert!(!self.params[id.0].trainable);
        &mut self.params[id.0].value
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].grad
    }

    /// Mutable view of a value and its gradient together (optimizer use).
    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor<T>, &mut Tensor<T>) {
        self.version += 1;
        let p = &mut self.params[id.0];
        (&mut p.value, &mut p.grad)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Total number of trainable scalars.
    pub fn trainable_len(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn read_count(&self, id: ParamId) -> u64 {
        self.reads[id.0].load(Ordering::Relaxed)
    }

    pub fn reset_read_counts(&self) {
        for r in &self.reads {
            r.store(0, Ordering::Relaxed);
        }
    }

    /// Copies every value from `other`, which must hold the same names and
    /// shapes in the same order.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Usage(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint {
                    name: dst.name.clone(),
                    msg: format!("expected {:?}, found `{}` {:?}", dst.value.shape(), src.name, src.value.shape()),
                });
            }
            dst.value = src.value.clone();
        }
        self.version += 1;
        Ok(())
    }
}
