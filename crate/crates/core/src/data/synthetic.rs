use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_idx_images, write_idx_labels, Dataset};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Isotropic Gaussian clusters centred on a circle of radius 5.
    Blobs,
    /// Interleaved Archimedean arms, one per class.
    Spirals,
}

/// Angle swept by each spiral arm, in radians.
const SPIRAL_SWEEP: f64 = 4.0;
const BLOB_RADIUS: f64 = 5.0;

pub fn blob_center(class: usize, classes: usize) -> [f64; 2] {
    let a = TAU * class as f64 / classes as f64;
    [BLOB_RADIUS * a.cos(), BLOB_RADIUS * a.sin()]
}

/// Seeded 2-D point clouds, `n_per_class` points per class in class order.
/// `noise` is the standard deviation of the per-coordinate offset (blobs) or
/// of the angular jitter in radians (spirals).
pub fn make_synthetic<T: Scalar>(
    kind: SyntheticKind,
    n_per_class: usize,
    classes: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if n_per_class == 0 {
        return Err(Error::param("n_per_class", "must be >= 1"));
    }
    if classes < 2 {
        return Err(Error::param("classes", format!("must be >= 2, got {classes}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::param("noise", format!("must be finite and >= 0, got {noise}")));
    }
    let mut rng = RngState::new(seed);
    let mut data = Vec::with_capacity(2 * n_per_class * classes);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for c in 0..classes {
        for j in 0..n_per_class {
            let (x, y) = match kind {
                SyntheticKind::Blobs => {
                    let [cx, cy] = blob_center(c, classes);
                    (cx + noise * rng.normal(), cy + noise * rng.normal())
                }
                SyntheticKind::Spirals => {
                    let t = (j + 1) as f64 / n_per_class as f64;
                    let theta = SPIRAL_SWEEP * t + TAU * c as f64 / classes as f64 + noise * rng.normal();
                    (t * theta.sin(), t * theta.cos())
                }
            };
            data.push(T::of(x));
            data.push(T::of(y));
            labels.push(c);
        }
    }
    Dataset::new(Tensor::from_vec(&[labels.len(), 2], data)?, labels, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlyphOptions {
    /// Side of the square canvas; at least 8.
    pub size: usize,
    /// Standard deviation of additive pixel noise (intensities in [0, 1]).
    pub noise: f64,
}

impl Default for GlyphOptions {
    fn default() -> Self {
        Self { size: 8, noise: 0.3 }
    }
}

const GLYPH_W: usize = 4;
const GLYPH_H: usize = 7;

/// Seven-segment masks, bits `a b c d e f g` from the top bar clockwise,
/// then the middle bar.
const SEGMENTS: [u8; 10] = [
    0b1111110, 0b0110000, 0b1101101, 0b1111001, 0b0110011, 0b1011011, 0b1011111, 0b1110000, 0b1111111, 0b1111011,
];

fn segment_pixels(seg: usize) -> Vec<(usize, usize)> {
    let mid = GLYPH_H / 2;
    let (r_end, c_end) = (GLYPH_H - 1, GLYPH_W - 1);
    match seg {
        0 => (0..GLYPH_W).map(|c| (0, c)).collect(),
        1 => (0..=mid).map(|r| (r, c_end)).collect(),
        2 => (mid..GLYPH_H).map(|r| (r, c_end)).collect(),
        3 => (0..GLYPH_W).map(|c| (r_end, c)).collect(),
        4 => (mid..GLYPH_H).map(|r| (r, 0)).collect(),
        5 => (0..=mid).map(|r| (r, 0)).collect(),
        _ => (0..GLYPH_W).map(|c| (mid, c)).collect(),
    }
}

/// A 10-class digit image set stored as raw bytes, ready for IDX output.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphImages {
    pub size: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl GlyphImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Same scaling as [`super::load_idx`].
    pub fn to_dataset<T: Scalar>(&self) -> Result<Dataset<T>> {
        let data = self.pixels.iter().map(|&p| T::of(p as f64 / 255.0)).collect();
        let x = Tensor::from_vec(&[self.len(), 1, self.size, self.size], data)?;
        Dataset::new(x, self.labels.iter().map(|&l| l as usize).collect(), 10)
    }

    pub fn write_idx(&self, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
        write_idx_images(images, self.len(), self.size, self.size, &self.pixels)?;
        write_idx_labels(labels, &self.labels)
    }
}

/// Seven-segment digits at a random position inside the canvas, with
/// random stroke intensity and Gaussian pixel noise. Samples cycle through
/// the classes.
pub fn make_glyphs(n_per_class: usize, opts: GlyphOptions, seed: u64) -> Result<GlyphImages> {
    if n_per_class == 0 {
        return Err(Error::param("n_per_class", "must be >= 1"));
    }
    if opts.size < GLYPH_H + 1 {
        return Err(Error::param("size", format!("must be >= {}, got {}", GLYPH_H + 1, opts.size)));
    }
    if !(opts.noise >= 0.0 && opts.noise.is_finite()) {
        return Err(Error::param("noise", "must be finite and >= 0"));
    }
    let s = opts.size;
    let masks: Vec<Vec<(usize, usize)>> = SEGMENTS
        .iter()
        .map(|&m| (0..7).filter(|b| m & (1 << (6 - b)) != 0).flat_map(segment_pixels).collect())
        .collect();
    let mut rng = RngState::new(seed);
    let n = 10 * n_per_class;
    let mut pixels = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let digit = k % 10;
        let dy = rng.index_inclusive(s - GLYPH_H);
        let dx = rng.index_inclusive(s - GLYPH_W);
        let ink = rng.uniform_range(0.6, 1.0);
        let mut img = vec![0.0f64; s * s];
        for &(r, c) in &masks[digit] {
            img[(r + dy) * s + c + dx] = ink;
        }
        pixels.extend(img.iter().map(|&v| {
            let v = (v + opts.noise * rng.normal()).clamp(0.0, 1.0);
            (v * 255.0).round() as u8
        }));
        labels.push(digit as u8);
    }
    Ok(GlyphImages { size: s, pixels, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digit_masks_are_distinct() {
        for a in 0..10 {
            for b in a + 1..10 {
                assert_ne!(SEGMENTS[a], SEGMENTS[b]);
            }
        }
        assert_eq!(SEGMENTS[8].count_ones(), 7);
        assert_eq!(SEGMENTS[1].count_ones(), 2);
    }

    #[test]
    fn noiseless_glyph_has_only_ink_and_background() {
        let g = make_glyphs(1, GlyphOptions { size: 8, noise: 0.0 }, 3).unwrap();
        assert_eq!(g.len(), 10);
        let img8 = &g.pixels[8 * 64..9 * 64];
        let ink: Vec<u8> = img8.iter().copied().filter(|&p| p > 0).collect();
        // 4 + 4 + 4 bars plus 4 × 2 side pixels not on a bar
        assert_eq!(ink.len(), 20);
        assert!(ink.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn spirals_stay_in_unit_disc() {
        let d = make_synthetic::<f64>(SyntheticKind::Spirals, 50, 3, 0.2, 1).unwrap();
        for r in 0..d.len() {
            let p = d.inputs().row(r);
            assert!((p[0] * p[0] + p[1] * p[1]).sqrt() <= 1.0 + 1e-12);
        }
    }
}
