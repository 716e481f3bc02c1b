use super::check_upstream;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default)]
pub struct Relu;

#[derive(Debug, Clone)]
pub struct ReluCtx<T: Scalar> {
    output: Tensor<T>,
}

impl Relu {
    pub fn forward<T: Scalar>(&self, input: &Tensor<T>) -> (Tensor<T>, ReluCtx<T>) {
        let out = input.map(|v| if v > T::zero() { v } else { T::zero() });
        (out.clone(), ReluCtx { output: out })
    }

    pub fn backward<T: Scalar>(&self, ctx: &ReluCtx<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        check_upstream("relu backward", ctx.output.shape(), upstream)?;
        let data = ctx
            .output
            .data()
            .iter()
            .zip(upstream.data())
            .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
            .collect();
        Ok(Tensor::from_raw(upstream.shape().to_vec(), data))
    }
}

/// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
#[derive(Debug, Clone, Copy, Default)]
pub struct AvgPool2;

#[derive(Debug, Clone)]
pub struct AvgPoolCtx {
    input_shape: Vec<usize>,
}

impl AvgPool2 {
    pub fn output_hw(h: usize, w: usize) -> (usize, usize) {
        (h / 2, w / 2)
    }

    pub fn forward<T: Scalar>(&self, input: &Tensor<T>) -> Result<(Tensor<T>, AvgPoolCtx)> {
        let s = input.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::Dimension {
                op: "avg_pool2",
                lhs: s.to_vec(),
                rhs: vec![2, 2],
            });
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = Self::output_hw(h, w);
        let quarter = T::of(0.25);
        let x = input.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let xp = &x[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = (2 * oy, 2 * ox);
                    let v = xp[y0 * w + x0] + xp[y0 * w + x0 + 1] + xp[(y0 + 1) * w + x0] + xp[(y0 + 1) * w + x0 + 1];
                    out.push(v * quarter);
                }
            }
        }
        Ok((
            Tensor::from_raw(vec![s[0], s[1], oh, ow], out),
            AvgPoolCtx {
                input_shape: s.to_vec(),
            },
        ))
    }

    pub fn backward<T: Scalar>(&self, ctx: &AvgPoolCtx, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let s = &ctx.input_shape;
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = Self::output_hw(h, w);
        check_upstream("avg_pool2 backward", &[s[0], s[1], oh, ow], upstream)?;
        let quarter = T::of(0.25);
        let mut dx = vec![T::zero(); planes * h * w];
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = upstream.data()[(p * oh + oy) * ow + ox] * quarter;
                    let (y0, x0) = (2 * oy, 2 * ox);
                    let base = p * h * w;
                    dx[base + y0 * w + x0] += g;
                    dx[base + y0 * w + x0 + 1] += g;
                    dx[base + (y0 + 1) * w + x0] += g;
                    dx[base + (y0 + 1) * w + x0 + 1] += g;
                }
            }
        }
        Ok(Tensor::from_raw(s.clone(), dx))
    }
}

/// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GlobalAvgPool;

#[derive(Debug, Clone)]
pub struct GlobalPoolCtx {
    input_shape: Vec<usize>,
}

impl GlobalAvgPool {
    pub fn forward<T: Scalar>(&self, input: &Tensor<T>) -> Result<(Tensor<T>, GlobalPoolCtx)> {
        let s = input.shape();
        if s.len() != 4 {
            return Err(Error::Dimension {
                op: "global_avg_pool",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let sp = s[2] * s[3];
        let inv = T::one() / T::of(sp as f64);
        let out = input
            .data()
            .chunks_exact(sp)
            .map(|plane| {
                let mut acc = T::zero();
                for &v in plane {
                    acc += v;
                }
                acc * inv
            })
            .collect();
        Ok((
            Tensor::from_raw(vec![s[0], s[1]], out),
            GlobalPoolCtx {
                input_shape: s.to_vec(),
            },
        ))
    }

    pub fn backward<T: Scalar>(&self, ctx: &GlobalPoolCtx, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let s = &ctx.input_shape;
        check_upstream("global_avg_pool backward", &s[..2], upstream)?;
        let sp = s[2] * s[3];
        let inv = T::one() / T::of(sp as f64);
        let mut dx = Vec::with_capacity(s.iter().product());
        for &g in upstream.data() {
            dx.extend(std::iter::repeat_n(g * inv, sp));
        }
        Ok(Tensor::from_raw(s.clone(), dx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward_backward() {
        let x = Tensor::<f64>::from_vec(&[2], vec![-1.0, 2.0]).unwrap();
        let (y, ctx) = Relu.forward(&x);
        assert_eq!(y.data(), &[0.0, 2.0]);
        let dx = Relu.backward(&ctx, &Tensor::<f64>::from_vec(&[2], vec![5.0, 5.0]).unwrap()).unwrap();
        assert_eq!(dx.data(), &[0.0, 5.0]);
    }

    #[test]
    fn avg_pool_values() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 3], vec![1., 2., 9., 3., 4., 9.]).unwrap();
        let (y, ctx) = AvgPool2.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[2.5]);
        let dx = AvgPool2.backward(&ctx, &Tensor::<f64>::full(&[1, 1, 1, 1], 4.0)).unwrap();
        assert_eq!(dx.data(), &[1., 1., 0., 1., 1., 0.]);
    }

    #[test]
    fn global_pool_values() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 1, 2], vec![1., 3., 5., 7.]).unwrap();
        let (y, ctx) = GlobalAvgPool.forward(&x).unwrap();
        assert_eq!(y.data(), &[2.0, 6.0]);
        let dx = GlobalAvgPool.backward(&ctx, &Tensor::<f64>::from_rows(&[vec![2., 4.]]).unwrap()).unwrap();
        assert_eq!(dx.data(), &[1., 1., 2., 2.]);
    }
}
