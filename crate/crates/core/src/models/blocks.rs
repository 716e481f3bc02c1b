//! Building blocks shared by both architectures.

use serde::{Deserialize, Serialize};

use super::ParamSlice;
use crate::error::Result;
use crate::nn::{
    AvgPool2, AvgPoolCtx, BatchNorm, BatchNormCtx, Conv2d, ConvCtx, GlobalAvgPool, GlobalPoolCtx, Linear, LinearCtx, Mode,
    ParamStore, Relu, ReluCtx,
};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Dense layers over flattened inputs.
    #[default]
    Linear,
    /// 3×3 convolutions (stride 1, padding 1) over `[C, H, W]` inputs.
    Conv,
}

#[derive(Debug, Clone)]
pub(crate) enum Core {
    Linear(Linear),
    Conv(Conv2d),
}

pub(crate) enum CoreCtx<T: Scalar> {
    Linear(LinearCtx<T>),
    Conv(ConvCtx<T>),
}

impl Core {
    pub(crate) fn new<T: Scalar>(
        kind: LayerKind,
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut RngState,
    ) -> Result<Self> {
        Ok(match kind {
            LayerKind::Linear => Core::Linear(Linear::new(store, name, inputs, outputs, bias, rng)?),
            LayerKind::Conv => Core::Conv(Conv2d::new(store, name, inputs, outputs, 3, 1, 1, bias, rng)?),
        })
    }

    fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>, out_active: usize) -> Result<(Tensor<T>, CoreCtx<T>)> {
        Ok(match self {
            Core::Linear(l) => {
                let (y, c) = l.forward_sliced(store, x, out_active)?;
                (y, CoreCtx::Linear(c))
            }
            Core::Conv(l) => {
                let (y, c) = l.forward_sliced(store, x, out_active)?;
                (y, CoreCtx::Conv(c))
            }
        })
    }

    fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>, out_active: usize) -> Result<Tensor<T>> {
        match self {
            Core::Linear(l) => l.apply(store, x, out_active),
            Core::Conv(l) => l.apply(store, x, out_active),
        }
    }

    fn backward<T: Scalar>(&self, store: &mut ParamStore<T>, ctx: &CoreCtx<T>, up: &Tensor<T>) -> Result<Tensor<T>> {
        match (self, ctx) {
            (Core::Linear(l), CoreCtx::Linear(c)) => l.backward(store, c, up),
            (Core::Conv(l), CoreCtx::Conv(c)) => l.backward(store, c, up),
            _ => Err(crate::Error::Usage("layer/context kind mismatch".into())),
        }
    }

    /// Weight (and bias) slices read with the given active extents.
    pub(crate) fn slices<T: Scalar>(&self, store: &ParamStore<T>, in_active: usize, out_active: usize) -> Vec<ParamSlice> {
        let (w, b, wshape) = match self {
            Core::Linear(l) => (l.weight, l.bias, vec![out_active, in_active]),
            Core::Conv(l) => (l.kernel, l.bias, vec![out_active, in_active, l.kernel_h, l.kernel_w]),
        };
        let mut v = vec![ParamSlice {
            name: store.param(w).name.clone(),
            shape: wshape,
            shared: true,
        }];
        if let Some(b) = b {
            v.push(ParamSlice {
                name: store.param(b).name.clone(),
                shape: vec![out_active],
                shared: true,
            });
        }
        v
    }

    pub(crate) fn outputs(&self) -> usize {
        match self {
            Core::Linear(l) => l.out_features,
            Core::Conv(l) => l.out_channels,
        }
    }
}

pub(crate) struct BlockCtx<T: Scalar> {
    core: CoreCtx<T>,
    bn: Option<BatchNormCtx<T>>,
    relu: ReluCtx<T>,
    pool: Option<AvgPoolCtx>,
}

/// `core → [batch norm] → ReLU → [2×2 average pool]`.
#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub core: Core,
    pub pool: bool,
}

impl Block {
    pub(crate) fn forward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        bn: Option<&BatchNorm>,
        x: &Tensor<T>,
        out_active: usize,
        mode: Mode,
    ) -> Result<(Tensor<T>, BlockCtx<T>)> {
        let (h, core) = self.core.forward(store, x, out_active)?;
        let (h, bn_ctx) = match bn {
            Some(bn) => {
                let (h, c) = bn.forward(store, &h, mode)?;
                (h, Some(c))
            }
            None => (h, None),
        };
        let (h, relu) = Relu.forward(&h);
        let (h, pool) = if self.pool {
            let (h, c) = AvgPool2.forward(&h)?;
            (h, Some(c))
        } else {
            (h, None)
        };
        Ok((
            h,
            BlockCtx {
                core,
                bn: bn_ctx,
                relu,
                pool,
            },
        ))
    }

    pub(crate) fn eval<T: Scalar>(&self, store: &ParamStore<T>, bn: Option<&BatchNorm>, x: &Tensor<T>, out_active: usize) -> Result<Tensor<T>> {
        let mut h = self.core.apply(store, x, out_active)?;
        if let Some(bn) = bn {
            h = bn.forward_eval(store, &h)?.0;
        }
        let (mut h, _) = Relu.forward(&h);
        if self.pool {
            h = AvgPool2.forward(&h)?.0;
        }
        Ok(h)
    }

    pub(crate) fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        bn: Option<&BatchNorm>,
        ctx: &BlockCtx<T>,
        up: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut g = match &ctx.pool {
            Some(c) => AvgPool2.backward(c, up)?,
            None => up.clone(),
        };
        g = Relu.backward(&ctx.relu, &g)?;
        if let (Some(bn), Some(c)) = (bn, &ctx.bn) {
            g = bn.backward(store, c, &g)?;
        }
        self.core.backward(store, &ctx.core, &g)
    }
}

pub(crate) struct HeadCtx<T: Scalar> {
    gap: Option<GlobalPoolCtx>,
    linear: LinearCtx<T>,
}

/// Classifier: `[global average pool] → linear`.
#[derive(Debug, Clone)]
pub(crate) struct Head {
    pub gap: bool,
    pub linear: Linear,
}

impl Head {
    pub(crate) fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, HeadCtx<T>)> {
        let (h, gap) = if self.gap {
            let (h, c) = GlobalAvgPool.forward(x)?;
            (h, Some(c))
        } else {
            (x.clone(), None)
        };
        let (y, linear) = self.linear.forward(store, &h)?;
        Ok((y, HeadCtx { gap, linear }))
    }

    pub(crate) fn eval<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.gap {
            let h = GlobalAvgPool.forward(x)?.0;
            self.linear.apply(store, &h, self.linear.out_features)
        } else {
            self.linear.apply(store, x, self.linear.out_features)
        }
    }

    pub(crate) fn backward<T: Scalar>(&self, store: &mut ParamStore<T>, ctx: &HeadCtx<T>, up: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.linear.backward(store, &ctx.linear, up)?;
        match &ctx.gap {
            Some(c) => GlobalAvgPool.backward(c, &g),
            None => Ok(g),
        }
    }

    pub(crate) fn slices<T: Scalar>(&self, store: &ParamStore<T>, in_active: usize, shared: bool) -> Vec<ParamSlice> {
        let mut v = vec![ParamSlice {
            name: store.param(self.linear.weight).name.clone(),
            shape: vec![self.linear.out_features, in_active],
            shared,
        }];
        if let Some(b) = self.linear.bias {
            v.push(ParamSlice {
                name: store.param(b).name.clone(),
                shape: vec![self.linear.out_features],
                shared,
            });
        }
        v
    }
}

/// Flattens `[N, ...]` to `[N, D]` when a dense model is fed multi-axis
/// samples.
pub(crate) fn flatten<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() == 2 {
        return Ok(x.clone());
    }
    x.reshape(&[x.rows(), x.row_len()])
}

pub(crate) fn bn_slices<T: Scalar>(store: &ParamStore<T>, bn: &BatchNorm, shared: bool) -> Vec<ParamSlice> {
    [bn.gamma, bn.beta]
        .iter()
        .map(|&id| ParamSlice {
            name: store.param(id).name.clone(),
            shape: vec![bn.channels],
            shared,
        })
        .collect()
}
