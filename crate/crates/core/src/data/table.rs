use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Loads a numeric CSV with a header row. Every column except
/// `label_column` becomes a feature; labels must be integers below
/// `classes`.
pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, label_column: &str, classes: usize) -> Result<Dataset<T>> {
    let path = path.as_ref();
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(format!("reading {}", path.display()), io),
            other => parse_err(1, format!("{other:?}")),
        })?;
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let label_at = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| parse_err(1, format!("no column named `{label_column}`")))?;
    let d = headers.len() - 1;

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, format!("malformed row ({e})"))
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        for (j, cell) in rec.iter().enumerate() {
            if j == label_at {
                let l: usize = cell
                    .parse()
                    .map_err(|_| parse_err(line, format!("label `{cell}` is not a non-negative integer")))?;
                labels.push(l);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| parse_err(line, format!("cell `{cell}` in column `{}` is not numeric", &headers[j])))?;
                if !v.is_finite() {
                    return Err(parse_err(line, format!("cell `{cell}` is not finite")));
                }
                data.push(T::of(v));
            }
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Validation(format!("{} has no data rows", path.display())));
    }
    Dataset::new(Tensor::from_vec(&[n, d], data)?, labels, classes)
}
