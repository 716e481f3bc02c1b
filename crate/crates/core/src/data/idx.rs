//! IDX binary files: a big-endian `u32` magic (`0x00000803` for unsigned-byte
//! images of rank 3, `0x00000801` for labels of rank 1), one big-endian
//! `u32` per dimension, then the raw bytes in row-major order.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let b = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.fail(self.bytes.len(), format!("file ends inside the {what}")))?;
        self.pos = end;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn header(&mut self, magic: u32) -> Result<Vec<usize>> {
        let got = self.u32("magic number")?;
        if got != magic {
            return Err(self.fail(0, format!("bad magic 0x{got:08x}, expected 0x{magic:08x}")));
        }
        let rank = (magic & 0xff) as usize;
        (0..rank).map(|d| Ok(self.u32(&format!("dimension {d}"))? as usize)).collect()
    }

    fn payload(&mut self, len: usize) -> Result<&'a [u8]> {
        let body = &self.bytes[self.pos..];
        if body.len() < len {
            return Err(self.fail(
                self.bytes.len(),
                format!("truncated payload: expected {len} bytes after the header, found {}", body.len()),
            ));
        }
        if body.len() > len {
            return Err(self.fail(self.pos + len, "trailing bytes after the payload"));
        }
        self.pos += len;
        Ok(body)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Loads an image/label IDX pair. Pixels become `value / 255` with shape
/// `N × 1 × H × W`; the class count is one more than the largest label
/// (at least 2).
pub fn load_idx<T: Scalar>(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ibytes = read(ip)?;
    let lbytes = read(lp)?;

    let mut r = Reader {
        path: ip,
        bytes: &ibytes,
        pos: 0,
    };
    let dims = r.header(IMAGES_MAGIC)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let pixels = r.payload(n * h * w)?;

    let mut r = Reader {
        path: lp,
        bytes: &lbytes,
        pos: 0,
    };
    let m = r.header(LABELS_MAGIC)?[0];
    let labels: Vec<usize> = r.payload(m)?.iter().map(|&b| b as usize).collect();

    if n != m {
        return Err(Error::Validation(format!("{n} images but {m} labels")));
    }
    let classes = labels.iter().max().map_or(2, |&l| (l + 1).max(2));
    let data = pixels.iter().map(|&p| T::of(p as f64 / 255.0)).collect();
    Dataset::new(Tensor::from_vec(&[n, 1, h, w], data)?, labels, classes)
}

pub fn write_idx_images(path: impl AsRef<Path>, n: usize, h: usize, w: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != n * h * w {
        return Err(Error::Dimension {
            op: "write_idx_images",
            lhs: vec![pixels.len()],
            rhs: vec![n, h, w],
        });
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
