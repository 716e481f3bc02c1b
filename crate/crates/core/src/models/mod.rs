//! Flexible models: `n` nested sub-models sharing one parameter store.
//!
//! Sub-models are indexed `1..=n` by increasing size. A single
//! [`FlexibleModel::forward_all`] call produces the logits of all of them,
//! which is what the joint losses in [`crate::losses`] consume.

mod blocks;
mod early_exit;
mod slimmable;

pub use blocks::LayerKind;
pub use early_exit::{EarlyExitConfig, EarlyExitNet, EarlyExitPass};
pub use slimmable::{SlimmableConfig, SlimmableNet, SlimmablePass};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNormOptions, Mode, ParamStore};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 1-based sub-model index, validated against the model size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubModelIndex(usize);

impl SubModelIndex {
    pub fn new(i: usize, n: usize) -> Result<Self> {
        if i == 0 || i > n {
            return Err(Error::Index { index: i, max: n });
        }
        Ok(Self(i))
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// Zero-based position.
    pub fn pos(self) -> usize {
        self.0 - 1
    }
}

/// Width multipliers of a slimmable model, ascending and ending at 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WidthSpec(Vec<f64>);

impl WidthSpec {
    pub fn new(multipliers: Vec<f64>) -> Result<Self> {
        let spec = Self(multipliers);
        spec.validate("model.multipliers")?;
        Ok(spec)
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        let m = &self.0;
        if m.is_empty() {
            return Err(Error::config(key, "needs at least one multiplier"));
        }
        if m.iter().any(|&w| !(w > 0.0 && w <= 1.0)) {
            return Err(Error::config(key, "multipliers must lie in (0, 1]"));
        }
        if m.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::config(key, "multipliers must be strictly ascending"));
        }
        if *m.last().unwrap() != 1.0 {
            return Err(Error::config(key, "last multiplier must be 1.0"));
        }
        Ok(())
    }

    pub fn multipliers(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Active channels of a layer with `full` channels at multiplier `w`:
    /// `ceil(w · full)`, at least one.
    pub fn channels(w: f64, full: usize) -> usize {
        // the epsilon keeps 0.3 * 10 = 3.0000000000000004 at 3
        ((w * full as f64 - 1e-9).ceil() as usize).clamp(1, full)
    }
}

impl Default for WidthSpec {
    fn default() -> Self {
        Self(vec![0.25, 0.5, 0.75, 1.0])
    }
}

/// How sub-models are labelled in metric columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubModelKind {
    Exit,
    Switch,
}

impl SubModelKind {
    pub fn label(self, i: usize) -> String {
        match self {
            SubModelKind::Exit => format!("exit{i}"),
            SubModelKind::Switch => format!("switch{i}"),
        }
    }
}

/// The part of a parameter a sub-model reads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlice {
    pub name: String,
    /// Shape of the leading slice in use.
    pub shape: Vec<usize>,
    /// False for per-sub-model private state (slimmable BN banks).
    pub shared: bool,
}

impl ParamSlice {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// True when `self` is a leading sub-slice of `other`.
    pub fn nested_in(&self, other: &ParamSlice) -> bool {
        self.name == other.name
            && self.shape.len() == other.shape.len()
            && self.shape.iter().zip(&other.shape).all(|(a, b)| a <= b)
    }
}

pub trait FlexibleModel<T: Scalar>: Send + Sync {
    /// Everything the backward pass needs from a training forward pass.
    type Pass: Send;

    fn num_submodels(&self) -> usize;

    fn kind(&self) -> SubModelKind;

    /// Per-sample input shape (without the batch axis).
    fn input_shape(&self) -> &[usize];

    fn classes(&self) -> usize;

    /// Logits of every sub-model. In [`Mode::Train`] batch-norm layers use
    /// batch moments and update their running statistics.
    fn forward_all(&self, store: &mut ParamStore<T>, input: &Tensor<T>, mode: Mode) -> Result<(Vec<Tensor<T>>, Self::Pass)>;

    /// Accumulates parameter gradients given `d loss / d logits` per
    /// sub-model.
    fn backward_all(&self, store: &mut ParamStore<T>, pass: &Self::Pass, logit_grads: &[Tensor<T>]) -> Result<()>;

    /// Single sub-model forward; in training mode only that sub-model's
    /// batch-norm statistics move.
    fn forward_one(&self, store: &mut ParamStore<T>, input: &Tensor<T>, i: SubModelIndex, mode: Mode) -> Result<Tensor<T>>;

    /// Evaluation-mode logits of every sub-model; does not mutate.
    fn eval_all(&self, store: &ParamStore<T>, input: &Tensor<T>) -> Result<Vec<Tensor<T>>>;

    /// Evaluation-mode logits of one sub-model, computing only what it needs.
    fn eval_one(&self, store: &ParamStore<T>, input: &Tensor<T>, i: SubModelIndex) -> Result<Tensor<T>>;

    /// Trainable parameter slices reachable by sub-model `i`.
    fn footprint(&self, store: &ParamStore<T>, i: SubModelIndex) -> Vec<ParamSlice>;

    /// Whether training needs batches of at least two samples.
    fn uses_batch_norm(&self) -> bool {
        true
    }

    fn param_count(&self, store: &ParamStore<T>, i: SubModelIndex) -> usize {
        self.footprint(store, i).iter().map(ParamSlice::numel).sum()
    }

    fn index(&self, i: usize) -> Result<SubModelIndex> {
        SubModelIndex::new(i, self.num_submodels())
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.shape().len() != self.input_shape().len() + 1 || &input.shape()[1..] != self.input_shape() {
            let mut want = vec![input.shape()[0]];
            want.extend_from_slice(self.input_shape());
            return Err(Error::Dimension {
                op: "model input",
                lhs: input.shape().to_vec(),
                rhs: want,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    EarlyExit(EarlyExitConfig),
    Slimmable(SlimmableConfig),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::EarlyExit(c) => c.validate(),
            ModelConfig::Slimmable(c) => c.validate(),
        }
    }

    pub fn num_submodels(&self) -> usize {
        match self {
            ModelConfig::EarlyExit(c) => c.exit_blocks().len(),
            ModelConfig::Slimmable(c) => c.multipliers.len(),
        }
    }
}

pub(crate) fn default_bn_momentum() -> f64 {
    BatchNormOptions::default().momentum
}

pub(crate) fn default_bn_eps() -> f64 {
    BatchNormOptions::default().epsilon
}

/// Either architecture behind one type, for config-driven callers.
#[derive(Debug)]
pub enum Net {
    EarlyExit(EarlyExitNet),
    Slimmable(SlimmableNet),
}

pub enum NetPass<T: Scalar> {
    EarlyExit(EarlyExitPass<T>),
    Slimmable(SlimmablePass<T>),
}

impl Net {
    pub fn build<T: Scalar>(
        cfg: &ModelConfig,
        input_shape: &[usize],
        classes: usize,
        store: &mut ParamStore<T>,
        rng: &mut RngState,
    ) -> Result<Self> {
        Ok(match cfg {
            ModelConfig::EarlyExit(c) => Net::EarlyExit(EarlyExitNet::new(c, input_shape, classes, store, rng)?),
            ModelConfig::Slimmable(c) => Net::Slimmable(SlimmableNet::new(c, input_shape, classes, store, rng)?),
        })
    }

    pub fn as_early_exit(&self) -> Option<&EarlyExitNet> {
        match self {
            Net::EarlyExit(n) => Some(n),
            Net::Slimmable(_) => None,
        }
    }
}

macro_rules! dispatch {
    ($self:ident, $n:ident => $e:expr) => {
        match $self {
            Net::EarlyExit($n) => $e,
            Net::Slimmable($n) => $e,
        }
    };
}

impl<T: Scalar> FlexibleModel<T> for Net {
    type Pass = NetPass<T>;

    fn num_submodels(&self) -> usize {
        dispatch!(self, n => FlexibleModel::<T>::num_submodels(n))
    }

    fn kind(&self) -> SubModelKind {
        dispatch!(self, n => FlexibleModel::<T>::kind(n))
    }

    fn input_shape(&self) -> &[usize] {
        dispatch!(self, n => FlexibleModel::<T>::input_shape(n))
    }

    fn classes(&self) -> usize {
        dispatch!(self, n => FlexibleModel::<T>::classes(n))
    }

    fn uses_batch_norm(&self) -> bool {
        dispatch!(self, n => FlexibleModel::<T>::uses_batch_norm(n))
    }

    fn forward_all(&self, store: &mut ParamStore<T>, input: &Tensor<T>, mode: Mode) -> Result<(Vec<Tensor<T>>, Self::Pass)> {
        match self {
            Net::EarlyExit(n) => n.forward_all(store, input, mode).map(|(l, p)| (l, NetPass::EarlyExit(p))),
            Net::Slimmable(n) => n.forward_all(store, input, mode).map(|(l, p)| (l, NetPass::Slimmable(p))),
        }
    }

    fn backward_all(&self, store: &mut ParamStore<T>, pass: &Self::Pass, logit_grads: &[Tensor<T>]) -> Result<()> {
        match (self, pass) {
            (Net::EarlyExit(n), NetPass::EarlyExit(p)) => n.backward_all(store, p, logit_grads),
            (Net::Slimmable(n), NetPass::Slimmable(p)) => n.backward_all(store, p, logit_grads),
            _ => Err(Error::Usage("forward pass recorded by a different architecture".into())),
        }
    }

    fn forward_one(&self, store: &mut ParamStore<T>, input: &Tensor<T>, i: SubModelIndex, mode: Mode) -> Result<Tensor<T>> {
        dispatch!(self, n => n.forward_one(store, input, i, mode))
    }

    fn eval_all(&self, store: &ParamStore<T>, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        dispatch!(self, n => n.eval_all(store, input))
    }

    fn eval_one(&self, store: &ParamStore<T>, input: &Tensor<T>, i: SubModelIndex) -> Result<Tensor<T>> {
        dispatch!(self, n => n.eval_one(store, input, i))
    }

    fn footprint(&self, store: &ParamStore<T>, i: SubModelIndex) -> Vec<ParamSlice> {
        dispatch!(self, n => n.footprint(store, i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_spec_rules() {
        assert!(WidthSpec::new(vec![0.25, 0.5, 0.75, 1.0]).is_ok());
        assert!(WidthSpec::new(vec![0.5, 0.25, 1.0]).is_err());
        assert!(WidthSpec::new(vec![0.5, 0.9]).is_err());
        assert!(WidthSpec::new(vec![0.0, 1.0]).is_err());
        assert!(WidthSpec::new(vec![]).is_err());
        assert_eq!(WidthSpec::channels(0.25, 16), 4);
        assert_eq!(WidthSpec::channels(0.3, 10), 3);
        assert_eq!(WidthSpec::channels(0.75, 6), 5);
        assert_eq!(WidthSpec::channels(0.01, 8), 1);
    }

    #[test]
    fn channel_counts_are_nested() {
        let spec = WidthSpec::default();
        for full in 1..70 {
            let ch: Vec<usize> = spec.multipliers().iter().map(|&w| WidthSpec::channels(w, full)).collect();
            assert!(ch.windows(2).all(|p| p[0] <= p[1]));
            assert_eq!(*ch.last().unwrap(), full);
        }
    }

    #[test]
    fn sub_model_index_bounds() {
        assert!(SubModelIndex::new(0, 3).is_err());
        assert!(SubModelIndex::new(4, 3).is_err());
        assert_eq!(SubModelIndex::new(3, 3).unwrap().pos(), 2);
    }
}
