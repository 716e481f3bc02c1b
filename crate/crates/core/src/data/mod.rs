//! Datasets, loaders, synthetic generators, splitting and batching.

mod idx;
mod synthetic;
mod table;

pub use idx::{load_idx, write_idx_images, write_idx_labels};
pub use synthetic::{blob_center, make_glyphs, make_synthetic, GlyphImages, GlyphOptions, SyntheticKind};
pub use table::load_csv;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::one_hot;
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stream ids keep split and batch-order randomness independent of the
/// model-initialisation stream of the same seed.
const SPLIT_STREAM: u64 = 0x5151;
const EPOCH_STREAM_BASE: u64 = 0x1_0000;

/// Per-feature affine map `x ↦ (x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar> {
    inputs: Tensor<T>,
    labels: Vec<usize>,
    classes: usize,
    norm: Option<Normalization>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.ndim() < 2 || inputs.rows() == 0 {
            return Err(Error::Validation(format!(
                "dataset needs at least one sample, got inputs of shape {:?}",
                inputs.shape()
            )));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::Validation(format!(
                "{} samples but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::Validation(format!("need at least 2 classes, got {classes}")));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Validation(format!("label {l} of sample {i} is not below class count {classes}")));
        }
        if !inputs.all_finite() {
            return Err(Error::Validation("inputs contain non-finite values".into()));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor<T> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.norm.as_ref()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let labels = idx
            .iter()
            .map(|&i| self.labels.get(i).copied().ok_or(Error::Index { index: i, max: self.len() }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inputs: self.inputs.select_rows(idx)?,
            labels,
            classes: self.classes,
            norm: self.norm.clone(),
        })
    }

    /// Inputs and one-hot targets of the given samples.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>, Vec<usize>)> {
        let x = self.inputs.select_rows(idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
        let y = one_hot(&labels, self.classes)?;
        Ok((x, y, labels))
    }

    /// Per-feature mean and population standard deviation; constant
    /// features get std 1 so they map to 0.
    pub fn fit_normalization(&self) -> Normalization {
        let d = self.inputs.row_len();
        let n = self.len() as f64;
        let mut mean = vec![0.0; d];
        for r in 0..self.len() {
            for (m, v) in mean.iter_mut().zip(self.inputs.row(r)) {
                *m += v.to_f64_lossless();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in 0..self.len() {
            for ((s, v), m) in var.iter_mut().zip(self.inputs.row(r)).zip(&mean) {
                let c = v.to_f64_lossless() - m;
                *s += c * c;
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Normalization { mean, std }
    }

    pub fn normalized(&self, norm: &Normalization) -> Result<Self> {
        let d = self.inputs.row_len();
        if norm.mean.len() != d || norm.std.len() != d {
            return Err(Error::Dimension {
                op: "normalize",
                lhs: vec![d],
                rhs: vec![norm.mean.len()],
            });
        }
        let mut data = self.inputs.data().to_vec();
        for row in data.chunks_mut(d) {
            for ((x, m), s) in row.iter_mut().zip(&norm.mean).zip(&norm.std) {
                *x = T::of((x.to_f64_lossless() - m) / s);
            }
        }
        Ok(Self {
            inputs: Tensor::from_vec(self.inputs.shape(), data)?,
            labels: self.labels.clone(),
            classes: self.classes,
            norm: Some(norm.clone()),
        })
    }
}

/// Seeded partition of `0..n` into `(train, val)` index sets, each sorted.
/// The validation side has `round(n · val_fraction)` samples.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::param("val_fraction", format!("must lie in (0, 1), got {val_fraction}")));
    }
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::param(
            "val_fraction",
            format!("{val_fraction} of {n} samples leaves an empty split"),
        ));
    }
    let perm = RngState::derive(seed, SPLIT_STREAM).permutation(n);
    let mut val = perm[..n_val].to_vec();
    let mut train = perm[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

pub fn split<T: Scalar>(ds: &Dataset<T>, val_fraction: f64, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    let (train, val) = split_indices(ds.len(), val_fraction, seed)?;
    Ok((ds.subset(&train)?, ds.subset(&val)?))
}

/// Mini-batch order for one training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub drop_last: bool,
    pub seed: u64,
}

impl BatchPlan {
    pub fn new(batch_size: usize, drop_last: bool, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::param("batch_size", "must be >= 1"));
        }
        Ok(Self {
            batch_size,
            drop_last,
            seed,
        })
    }

    pub fn permutation(&self, n: usize, epoch: usize) -> Vec<usize> {
        RngState::derive(self.seed, EPOCH_STREAM_BASE + epoch as u64).permutation(n)
    }

    /// Index batches for `epoch`. Without `drop_last` a trailing batch of a
    /// single sample is folded into the previous batch, since batch norm
    /// cannot train on one sample.
    pub fn batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let perm = self.permutation(n, epoch);
        let mut out: Vec<Vec<usize>> = perm.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        if let Some(last) = out.last() {
            if last.len() < self.batch_size {
                if self.drop_last {
                    out.pop();
                } else if last.len() == 1 && out.len() > 1 {
                    let tail = out.pop().unwrap();
                    out.last_mut().unwrap().extend(tail);
                }
            }
        }
        out
    }
}
