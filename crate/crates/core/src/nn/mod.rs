//! Differentiable layers with explicit forward/backward contracts.
//!
//! A forward call returns the output plus a context holding exactly what the
//! matching backward call needs. Backward accumulates parameter gradients
//! into the [`ParamStore`] and returns the gradient with respect to the
//! layer input.

mod activation;
pub mod checkpoint;
mod conv;
pub mod gradcheck;
mod linear;
mod norm;
mod params;

pub use activation::{AvgPool2, AvgPoolCtx, GlobalAvgPool, GlobalPoolCtx, Relu, ReluCtx};
pub use conv::{Conv2d, ConvCtx};
pub use gradcheck::{grad_check, GradCheckReport};
pub use linear::{Linear, LinearCtx};
pub use norm::{BatchNorm, BatchNormCtx, BatchNormOptions};
pub use params::{Param, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Identifies the layer and parameter version a context was recorded
/// against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Stamp {
    layer: ParamId,
    version: u64,
}

impl Stamp {
    pub(crate) fn new<T: Scalar>(layer: ParamId, store: &ParamStore<T>) -> Self {
        Self {
            layer,
            version: store.version(),
        }
    }

    pub(crate) fn check<T: Scalar>(&self, layer: ParamId, store: &ParamStore<T>, what: &str) -> Result<()> {
        if self.layer != layer {
            return Err(Error::Usage(format!(
                "{what} backward called with a context recorded by a different layer"
            )));
        }
        if self.version != store.version() {
            return Err(Error::Usage(format!(
                "{what} backward called with a stale context (parameters changed since forward)"
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_upstream<T: Scalar>(what: &'static str, expected: &[usize], got: &Tensor<T>) -> Result<()> {
    if expected != got.shape() {
        return Err(Error::Dimension {
            op: what,
            lhs: expected.to_vec(),
            rhs: got.shape().to_vec(),
        });
    }
    Ok(())
}

/// Kaiming-uniform initialisation for ReLU networks: `U(-b, b)` with
/// `b = sqrt(6 / fan_in)`.
pub(crate) fn kaiming_uniform<T: Scalar>(rng: &mut RngState, shape: &[usize], fan_in: usize) -> Result<Tensor<T>> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(rng, shape, -bound, bound)
}
