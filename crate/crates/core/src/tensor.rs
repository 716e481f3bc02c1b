//! Dense row-major tensors.
//!
//! Every public operation is pure: operands are borrowed and a fresh tensor
//! is returned. Reductions run sequentially in row-major order so repeated
//! runs produce bit-identical results.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != len
    {
        return Err(Error::Shape(shape.to_vec()));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, validating the shape and that every value is finite.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Unchecked constructor for kernels that already guarantee the shape.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_raw(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a 2-D tensor from nested rows (handy in tests and fixtures).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Validation("ragged rows".into()));
        }
        let data = rows.iter().flatten().map(|&v| T::of(v)).collect();
        Self::from_vec(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of the leading (batch) axis.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per leading-axis slice.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape, self.data.len())?;
        Ok(Self::from_raw(shape.to_vec(), self.data.clone()))
    }

    /// Gathers leading-axis rows by index.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::Shape(vec![0]));
        }
        let w = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= self.shape[0] {
                return Err(Error::Index {
                    index: i,
                    max: self.shape[0] - 1,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Self::from_raw(shape, data))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    fn finite_or(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::Domain {
                op,
                msg: "result is not finite".into(),
            })
        }
    }

    fn zip_broadcast(&self, rhs: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == rhs.shape {
            let data = self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Self::from_raw(self.shape.clone(), data).finite_or(op);
        }
        // rhs broadcast over the leading batch axis of self
        if self.shape.len() == rhs.shape.len() + 1 && self.shape[1..] == rhs.shape[..] {
            let w = rhs.data.len();
            let data = self
                .data
                .iter()
                .enumerate()
                .map(|(k, &a)| f(a, rhs.data[k % w]))
                .collect();
            return Self::from_raw(self.shape.clone(), data).finite_or(op);
        }
        Err(Error::Dimension {
            op,
            lhs: self.shape.clone(),
            rhs: rhs.shape.clone(),
        })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_broadcast(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_broadcast(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.zip_broadcast(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        self.map(|v| v * s).finite_or("scale")
    }

    pub fn exp(&self) -> Result<Self> {
        self.map(T::exp).finite_or("exp")
    }

    pub fn log(&self) -> Result<Self> {
        if let Some(v) = self.data.iter().find(|&&v| v <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {v}"),
            });
        }
        Ok(self.map(T::ln))
    }

    pub fn reduce_sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn reduce_mean(&self) -> T {
        self.reduce_sum() / T::of(self.data.len() as f64)
    }

    /// Sum over the leading axis: `[N, ...] -> [...]`.
    pub fn sum_rows(&self) -> Self {
        let w = self.row_len();
        let mut out = vec![T::zero(); w];
        for r in self.data.chunks_exact(w) {
            for (o, &v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        let shape = if self.shape.len() > 1 {
            self.shape[1..].to_vec()
        } else {
            vec![1]
        };
        Self::from_raw(shape, out)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::from_raw(vec![n, m], out))
    }

    /// Standard matrix product of two 2-D tensors.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, k, p) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![T::zero(); m * p];
        gemm_nn(&self.data, k, &rhs.data, p, &mut out, m, k, p);
        Ok(Self::from_raw(vec![m, p], out))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(Error::Dimension {
                op: "softmax",
                lhs: self.shape.clone(),
                rhs: vec![axis],
            });
        }
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |c: usize| base + c * inner;
                let mut max = T::neg_infinity();
                for c in 0..len {
                    max = max.max(self.data[idx(c)]);
                }
                let mut sum = T::zero();
                for c in 0..len {
                    let e = (self.data[idx(c)] - max).exp();
                    out[idx(c)] = e;
                    sum += e;
                }
                for c in 0..len {
                    out[idx(c)] /= sum;
                }
            }
        }
        Ok(Self::from_raw(self.shape.clone(), out))
    }

    pub fn rand_normal(rng: &mut RngState, shape: &[usize], mean: f64, stddev: f64) -> Result<Self> {
        if !(stddev >= 0.0) {
            return Err(Error::param("stddev", format!("must be >= 0, got {stddev}")));
        }
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if stddev == 0.0 {
                    T::of(mean)
                } else {
                    T::of(mean + stddev * rng.normal())
                }
            })
            .collect();
        Self::from_vec(shape, data)
    }

    pub fn rand_uniform(rng: &mut RngState, shape: &[usize], low: f64, high: f64) -> Result<Self> {
        if !(high >= low) {
            return Err(Error::param("high", "must be >= low"));
        }
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.uniform_range(low, high))).collect();
        Self::from_vec(shape, data)
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out[m×p] += a[m×k] · b[k×p]`, with explicit leading strides.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm_nn<T: Scalar>(
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    out: &mut [T],
    m: usize,
    k: usize,
    p: usize,
) {
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for kk in 0..k {
            let aik = a[i * lda + kk];
            if aik == T::zero() {
                continue;
            }
            let brow = &b[kk * ldb..kk * ldb + p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // four independent partial sums keep the FPU pipeline busy
    let n = a.len().min(b.len());
    let mut acc = [T::zero(); 4];
    let (a4, b4) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let (ra, rb) = (a4.remainder(), b4.remainder());
    for (x, y) in a4.zip(b4) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
