use super::{check_upstream, kaiming_uniform, ParamId, ParamStore, Stamp};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::{dot, gemm_nn, Tensor};

/// 2-D convolution over `[N, C, H, W]` inputs, kernel `[O, C, kh, kw]`.
///
/// Implemented as im2col + GEMM per sample. A slimmed call uses the leading
/// `out_active` output channels and the leading `input.shape[1]` input
/// channels; for a row-major kernel that input slice is a contiguous prefix
/// of each output-channel row.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCtx<T: Scalar> {
    stamp: Stamp,
    input: Tensor<T>,
    out_active: usize,
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut RngState,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::param("kernel", format!("kernel size must be odd, got {kernel}")));
        }
        if stride == 0 {
            return Err(Error::param("stride", "must be >= 1"));
        }
        let fan_in = in_channels * kernel * kernel;
        let k = kaiming_uniform(rng, &[out_channels, in_channels, kernel, kernel], fan_in)?;
        let kernel_id = store.add(&format!("{name}.weight"), k, true)?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[out_channels]), true)?)
        } else {
            None
        };
        Ok(Self {
            kernel: kernel_id,
            bias,
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        })
    }

    /// Output spatial size for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return None;
        }
        Some(((ph - self.kernel_h) / self.stride + 1, (pw - self.kernel_w) / self.stride + 1))
    }

    fn geometry<T: Scalar>(&self, input: &Tensor<T>, out_active: usize) -> Result<Geometry> {
        let bad = || Error::Dimension {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: vec![self.out_channels, self.in_channels, self.kernel_h, self.kernel_w],
        };
        if input.ndim() != 4 || input.shape()[1] > self.in_channels || out_active == 0 || out_active > self.out_channels {
            return Err(bad());
        }
        let (c, h, w) = (input.shape()[1], input.shape()[2], input.shape()[3]);
        let (oh, ow) = self.output_hw(h, w).ok_or_else(bad)?;
        Ok(Geometry { c, h, w, oh, ow })
    }

    /// Unfolds one sample into columns `off..off + oh·ow` of every row of
    /// `col` (row stride `ld`).
    fn im2col<T: Scalar>(&self, g: &Geometry, x: &[T], col: &mut [T], ld: usize, off: usize) {
        let (kh, kw, s, p) = (self.kernel_h, self.kernel_w, self.stride, self.padding as isize);
        for c in 0..g.c {
            let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((c * kh + ky) * kw + kx) * ld + off;
                    for oy in 0..g.oh {
                        let iy = (oy * s) as isize + ky as isize - p;
                        let dst = &mut col[row + oy * g.ow..row + (oy + 1) * g.ow];
                        if iy < 0 || iy >= g.h as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - p;
                            *d = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, g: &Geometry, col: &[T], ld: usize, off: usize, dx: &mut [T]) {
        let (kh, kw, s, p) = (self.kernel_h, self.kernel_w, self.stride, self.padding as isize);
        for c in 0..g.c {
            let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((c * kh + ky) * kw + kx) * ld + off;
                    for oy in 0..g.oh {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &col[row + oy * g.ow..row + (oy + 1) * g.ow];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < g.w as isize {
                                dxc[iy as usize * g.w + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Whole-batch column matrix: `kact` rows of `n · oh · ow` entries.
    fn unfold<T: Scalar>(&self, g: &Geometry, input: &Tensor<T>) -> Vec<T> {
        let n = input.rows();
        let plane = g.oh * g.ow;
        let ld = n * plane;
        let mut col = vec![T::zero(); g.c * self.kernel_h * self.kernel_w * ld];
        for s in 0..n {
            self.im2col(g, input.row(s), &mut col, ld, s * plane);
        }
        col
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, input: &Tensor<T>) -> Result<(Tensor<T>, ConvCtx<T>)> {
        self.forward_sliced(store, input, self.out_channels)
    }

    pub fn forward_sliced<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        input: &Tensor<T>,
        out_active: usize,
    ) -> Result<(Tensor<T>, ConvCtx<T>)> {
        let out = self.apply(store, input, out_active)?;
        let ctx = ConvCtx {
            stamp: Stamp::new(self.kernel, store),
            input: input.clone(),
            out_active,
        };
        Ok((out, ctx))
    }

    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, input: &Tensor<T>, out_active: usize) -> Result<Tensor<T>> {
        let g = self.geometry(input, out_active)?;
        let n = input.rows();
        let plane = g.oh * g.ow;
        let ld = n * plane;
        let krow = self.in_channels * self.kernel_h * self.kernel_w;
        let kact = g.c * self.kernel_h * self.kernel_w;
        let kernel = store.value(self.kernel).data();
        let col = self.unfold(&g, input);
        // out_t: [out_active, n · plane]
        let mut out_t = vec![T::zero(); out_active * ld];
        gemm_nn(kernel, krow, &col, ld, &mut out_t, out_active, kact, ld);
        let bias = self.bias.map(|id| store.value(id).data());
        let mut out = vec![T::zero(); n * out_active * plane];
        for (oc, row) in out_t.chunks_exact(ld).enumerate() {
            let b = bias.map_or(T::zero(), |b| b[oc]);
            for s in 0..n {
                let dst = &mut out[(s * out_active + oc) * plane..(s * out_active + oc + 1) * plane];
                for (d, &v) in dst.iter_mut().zip(&row[s * plane..(s + 1) * plane]) {
                    *d = v + b;
                }
            }
        }
        Ok(Tensor::from_raw(vec![n, out_active, g.oh, g.ow], out))
    }

    pub fn backward<T: Scalar>(&self, store: &mut ParamStore<T>, ctx: &ConvCtx<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        ctx.stamp.check(self.kernel, store, "conv2d")?;
        let g = self.geometry(&ctx.input, ctx.out_active)?;
        let n = ctx.input.rows();
        let oa = ctx.out_active;
        check_upstream("conv2d backward", &[n, oa, g.oh, g.ow], upstream)?;
        let plane = g.oh * g.ow;
        let ld = n * plane;
        let krow = self.in_channels * self.kernel_h * self.kernel_w;
        let kact = g.c * self.kernel_h * self.kernel_w;

        // dy_t: [oa, n · plane]
        let dy = upstream.data();
        let mut dy_t = vec![T::zero(); oa * ld];
        for s in 0..n {
            for oc in 0..oa {
                dy_t[oc * ld + s * plane..oc * ld + (s + 1) * plane]
                    .copy_from_slice(&dy[(s * oa + oc) * plane..(s * oa + oc + 1) * plane]);
            }
        }
        let col = self.unfold(&g, &ctx.input);
        {
            let gk = store.grad_mut(self.kernel).data_mut();
            for (oc, dyo) in dy_t.chunks_exact(ld).enumerate() {
                for (k, acc) in gk[oc * krow..oc * krow + kact].iter_mut().enumerate() {
                    *acc += dot(dyo, &col[k * ld..(k + 1) * ld]);
                }
            }
        }
        if let Some(bid) = self.bias {
            let gb = store.grad_mut(bid).data_mut();
            for (oc, dyo) in dy_t.chunks_exact(ld).enumerate() {
                let mut acc = T::zero();
                for &v in dyo {
                    acc += v;
                }
                gb[oc] += acc;
            }
        }
        // dcol = Kᵀ · dy_t, reusing the column buffer
        let mut dcol = col;
        dcol.iter_mut().for_each(|v| *v = T::zero());
        let kernel = store.value(self.kernel).data();
        for (oc, dyo) in dy_t.chunks_exact(ld).enumerate() {
            for k in 0..kact {
                let wv = kernel[oc * krow + k];
                if wv == T::zero() {
                    continue;
                }
                for (d, &u) in dcol[k * ld..(k + 1) * ld].iter_mut().zip(dyo) {
                    *d += wv * u;
                }
            }
        }
        let in_len = ctx.input.row_len();
        let mut dx = vec![T::zero(); ctx.input.numel()];
        for s in 0..n {
            self.col2im(&g, &dcol, ld, s * plane, &mut dx[s * in_len..(s + 1) * in_len]);
        }
        Ok(Tensor::from_raw(ctx.input.shape().to_vec(), dx))
    }

    pub fn active_params(&self, in_active: usize, out_active: usize) -> usize {
        out_active * in_active * self.kernel_h * self.kernel_w + self.bias.map_or(0, |_| out_active)
    }
}
