use super::{check_upstream, Mode, ParamId, ParamStore, Stamp};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormOptions {
    /// Weight of the current batch in the running-moment update.
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormOptions {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

/// Batch normalisation over the channel axis (axis 1) of `[N, C]` or
/// `[N, C, H, W]` inputs.
///
/// `gamma`/`beta` may be longer than `C`: a slimmed call uses their leading
/// entries. The running moments always have exactly `C` entries.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub options: BatchNormOptions,
}

#[derive(Debug, Clone)]
pub struct BatchNormCtx<T: Scalar> {
    stamp: Stamp,
    shape: Vec<usize>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

impl BatchNorm {
    /// Registers private affine parameters and running moments.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, options: BatchNormOptions) -> Result<Self> {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[channels], T::one()), true)?;
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]), true)?;
        Self::with_affine(store, name, channels, gamma, beta, options)
    }

    /// Registers running moments only, normalising with the given (possibly
    /// shared, wider) affine parameters.
    pub fn with_affine<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        gamma: ParamId,
        beta: ParamId,
        options: BatchNormOptions,
    ) -> Result<Self> {
        if !(options.momentum >= 0.0 && options.momentum <= 1.0) {
            return Err(Error::param("momentum", format!("must lie in [0, 1], got {}", options.momentum)));
        }
        if !(options.epsilon > 0.0) {
            return Err(Error::param("epsilon", "must be > 0"));
        }
        if store.param(gamma).value.numel() < channels || store.param(beta).value.numel() < channels {
            return Err(Error::Usage(format!("affine parameters narrower than {channels} channels")));
        }
        let running_mean = store.add(&format!("{name}.running_mean"), Tensor::zeros(&[channels]), false)?;
        let running_var = store.add(&format!("{name}.running_var"), Tensor::full(&[channels], T::one()), false)?;
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
            options,
        })
    }

    fn layout<T: Scalar>(&self, input: &Tensor<T>) -> Result<(usize, usize)> {
        let s = input.shape();
        if (s.len() != 2 && s.len() != 4) || s[1] != self.channels {
            return Err(Error::Dimension {
                op: "batch_norm",
                lhs: s.to_vec(),
                rhs: vec![self.channels],
            });
        }
        let spatial = s[2..].iter().product::<usize>();
        Ok((s[0], spatial))
    }

    /// Training or evaluation forward pass. In training mode the running
    /// moments are updated in place; trainable values are left untouched.
    pub fn forward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        input: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, BatchNormCtx<T>)> {
        match mode {
            Mode::Eval => self.forward_eval(store, input),
            Mode::Train => {
                let (out, ctx, mean, var) = self.normalize_batch(store, input)?;
                let m = T::of(self.options.momentum);
                let keep = T::one() - m;
                for (r, b) in store.stat_mut(self.running_mean).data_mut().iter_mut().zip(&mean) {
                    *r = keep * *r + m * *b;
                }
                for (r, b) in store.stat_mut(self.running_var).data_mut().iter_mut().zip(&var) {
                    *r = keep * *r + m * *b;
                }
                Ok((out, ctx))
            }
        }
    }

    #[allow(clippy::type_complexity)]
    fn normalize_batch<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        input: &Tensor<T>,
    ) -> Result<(Tensor<T>, BatchNormCtx<T>, Vec<T>, Vec<T>)> {
        let (n, sp) = self.layout(input)?;
        let c = self.channels;
        let count = T::of((n * sp) as f64);
        let x = input.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for s in 0..n {
            for (ch, m) in mean.iter_mut().enumerate() {
                for &v in &x[(s * c + ch) * sp..(s * c + ch + 1) * sp] {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for s in 0..n {
            for ch in 0..c {
                for &v in &x[(s * c + ch) * sp..(s * c + ch + 1) * sp] {
                    let d = v - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let eps = T::of(self.options.epsilon);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.affine(store, input, &mean, &inv_std, sp);
        let ctx = BatchNormCtx {
            stamp: Stamp::new(self.gamma, store),
            shape: input.shape().to_vec(),
            xhat,
            inv_std,
            mode: Mode::Train,
        };
        Ok((out, ctx, mean, var))
    }

    fn affine<T: Scalar>(&self, store: &ParamStore<T>, input: &Tensor<T>, mean: &[T], inv_std: &[T], sp: usize) -> (Tensor<T>, Vec<T>) {
        let c = self.channels;
        let gamma = store.value(self.gamma).data();
        let beta = store.value(self.beta).data();
        let mut xhat = vec![T::zero(); input.numel()];
        let mut out = vec![T::zero(); input.numel()];
        for (k, (&v, (xh, o))) in input.data().iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (k / sp) % c;
            *xh = (v - mean[ch]) * inv_std[ch];
            *o = gamma[ch] * *xh + beta[ch];
        }
        (Tensor::from_raw(input.shape().to_vec(), out), xhat)
    }

    /// Evaluation-mode forward using the running moments; never mutates.
    pub fn forward_eval<T: Scalar>(&self, store: &ParamStore<T>, input: &Tensor<T>) -> Result<(Tensor<T>, BatchNormCtx<T>)> {
        let (_, sp) = self.layout(input)?;
        let eps = T::of(self.options.epsilon);
        let mean = store.value(self.running_mean).data().to_vec();
        let inv_std: Vec<T> = store
            .value(self.running_var)
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let (out, xhat) = self.affine(store, input, &mean, &inv_std, sp);
        let ctx = BatchNormCtx {
            stamp: Stamp::new(self.gamma, store),
            shape: input.shape().to_vec(),
            xhat,
            inv_std,
            mode: Mode::Eval,
        };
        Ok((out, ctx))
    }

    /// Full batch-statistics gradient in training mode (the batch mean and
    /// variance are functions of the input); plain affine gradient in
    /// evaluation mode.
    pub fn backward<T: Scalar>(&self, store: &mut ParamStore<T>, ctx: &BatchNormCtx<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        ctx.stamp.check(self.gamma, store, "batch_norm")?;
        check_upstream("batch_norm backward", &ctx.shape, upstream)?;
        let c = self.channels;
        let n = ctx.shape[0];
        let sp = ctx.shape[2..].iter().product::<usize>();
        let dy = upstream.data();
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let r = (s * c + ch) * sp..(s * c + ch + 1) * sp;
                for (&g, &xh) in dy[r.clone()].iter().zip(&ctx.xhat[r]) {
                    sum_dy[ch] += g;
                    sum_dy_xhat[ch] += g * xh;
                }
            }
        }
        {
            let gg = store.grad_mut(self.gamma).data_mut();
            for ch in 0..c {
                gg[ch] += sum_dy_xhat[ch];
            }
        }
        {
            let gb = store.grad_mut(self.beta).data_mut();
            for ch in 0..c {
                gb[ch] += sum_dy[ch];
            }
        }
        let gamma = store.value(self.gamma).data();
        let count = T::of((n * sp) as f64);
        let mut dx = vec![T::zero(); dy.len()];
        for (k, d) in dx.iter_mut().enumerate() {
            let ch = (k / sp) % c;
            let scale = gamma[ch] * ctx.inv_std[ch];
            *d = match ctx.mode {
                Mode::Eval => scale * dy[k],
                Mode::Train => scale * (dy[k] - sum_dy[ch] / count - ctx.xhat[k] * sum_dy_xhat[ch] / count),
            };
        }
        Ok(Tensor::from_raw(ctx.shape.clone(), dx))
    }
}
