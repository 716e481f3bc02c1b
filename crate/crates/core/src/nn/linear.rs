use super::{check_upstream, kaiming_uniform, ParamId, ParamStore, Stamp};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::{dot, Tensor};

/// Fully connected layer `y = x·Wᵀ + b` with `W: [out × in]`.
///
/// The `*_sliced` entry points run the layer on the leading `out_active`
/// rows and leading `input.shape[1]` columns of `W`, which is how slimmable
/// sub-models share one full-width weight.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Debug, Clone)]
pub struct LinearCtx<T: Scalar> {
    stamp: Stamp,
    input: Tensor<T>,
    out_active: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut RngState,
    ) -> Result<Self> {
        let w = kaiming_uniform(rng, &[out_features, in_features], in_features)?;
        let weight = store.add(&format!("{name}.weight"), w, true)?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[out_features]), true)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, input: &Tensor<T>) -> Result<(Tensor<T>, LinearCtx<T>)> {
        self.forward_sliced(store, input, self.out_features)
    }

    pub fn forward_sliced<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        input: &Tensor<T>,
        out_active: usize,
    ) -> Result<(Tensor<T>, LinearCtx<T>)> {
        let out = self.apply(store, input, out_active)?;
        let ctx = LinearCtx {
            stamp: Stamp::new(self.weight, store),
            input: input.clone(),
            out_active,
        };
        Ok((out, ctx))
    }

    /// Forward without recording a context.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, input: &Tensor<T>, out_active: usize) -> Result<Tensor<T>> {
        if input.ndim() != 2 || input.shape()[1] > self.in_features || out_active == 0 || out_active > self.out_features {
            return Err(Error::Dimension {
                op: "linear",
                lhs: input.shape().to_vec(),
                rhs: vec![self.out_features, self.in_features],
            });
        }
        let n = input.rows();
        let in_a = input.shape()[1];
        let w = store.value(self.weight).data();
        let b = self.bias.map(|id| store.value(id).data());
        let mut out = vec![T::zero(); n * out_active];
        for r in 0..n {
            let x = input.row(r);
            let orow = &mut out[r * out_active..(r + 1) * out_active];
            for (o, y) in orow.iter_mut().enumerate() {
                let wrow = &w[o * self.in_features..o * self.in_features + in_a];
                *y = dot(wrow, x) + b.map_or(T::zero(), |b| b[o]);
            }
        }
        Ok(Tensor::from_raw(vec![n, out_active], out))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        ctx: &LinearCtx<T>,
        upstream: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        ctx.stamp.check(self.weight, store, "linear")?;
        let n = ctx.input.rows();
        let in_a = ctx.input.shape()[1];
        let out_a = ctx.out_active;
        check_upstream("linear backward", &[n, out_a], upstream)?;
        let stride = self.in_features;

        {
            let gw = store.grad_mut(self.weight).data_mut();
            for r in 0..n {
                let x = ctx.input.row(r);
                let dy = upstream.row(r);
                for (o, &g) in dy.iter().enumerate() {
                    if g == T::zero() {
                        continue;
                    }
                    for (acc, &xv) in gw[o * stride..o * stride + in_a].iter_mut().zip(x) {
                        *acc += g * xv;
                    }
                }
            }
        }
        if let Some(bid) = self.bias {
            let gb = store.grad_mut(bid).data_mut();
            for r in 0..n {
                for (acc, &g) in gb[..out_a].iter_mut().zip(upstream.row(r)) {
                    *acc += g;
                }
            }
        }
        let w = store.value(self.weight).data();
        let mut dx = vec![T::zero(); n * in_a];
        for r in 0..n {
            let dxr = &mut dx[r * in_a..(r + 1) * in_a];
            for (o, &g) in upstream.row(r).iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                for (acc, &wv) in dxr.iter_mut().zip(&w[o * stride..o * stride + in_a]) {
                    *acc += g * wv;
                }
            }
        }
        Ok(Tensor::from_raw(vec![n, in_a], dx))
    }

    /// Trainable scalars touched when running with the given active extents.
    pub fn active_params(&self, in_active: usize, out_active: usize) -> usize {
        out_active * in_active + self.bias.map_or(0, |_| out_active)
    }
}
