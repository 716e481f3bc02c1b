//! Parameter checkpoint files.
//!
//! A checkpoint is a JSON document:
//!
//! ```json
//! {
//!   "format": "flexdistill-checkpoint/1",
//!   "params": [
//!     { "name": "block1.weight", "shape": [16, 1, 3, 3], "trainable": true,
//!       "values": [0.125, -0.0625, ...] }
//!   ]
//! }
//! ```
//!
//! Values are written as shortest round-trip decimals and parsed with
//! correctly-rounded conversion, so every `f64` survives a save/load cycle
//! bit-exactly. `f32` stores widen losslessly to `f64` on save.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "flexdistill-checkpoint/1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub params: Vec<CheckpointEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| CheckpointEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
                values: p.value.data().iter().map(|v| v.to_f64_lossless()).collect(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            params,
        }
    }

    /// Writes every entry into `store`, which must already hold exactly the
    /// same names, order, shapes and trainable flags.
    pub fn apply_to<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint {
                name: "format".into(),
                msg: format!("unsupported format `{}`", self.format),
            });
        }
        let expected: Vec<(String, Vec<usize>, bool)> = store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.shape().to_vec(), p.trainable))
            .collect();
        for (name, shape, trainable) in &expected {
            let entry = self.params.iter().find(|e| &e.name == name).ok_or_else(|| Error::Checkpoint {
                name: name.clone(),
                msg: "missing from checkpoint".into(),
            })?;
            if &entry.shape != shape || entry.trainable != *trainable {
                return Err(Error::Checkpoint {
                    name: name.clone(),
                    msg: format!("model expects shape {shape:?}, checkpoint holds {:?}", entry.shape),
                });
            }
        }
        if let Some(extra) = self.params.iter().find(|e| store.id(&e.name).is_none()) {
            return Err(Error::Checkpoint {
                name: extra.name.clone(),
                msg: "not present in the model".into(),
            });
        }
        for entry in &self.params {
            let id = store.id(&entry.name).expect("checked above");
            let data = entry.values.iter().map(|&v| T::of(v)).collect();
            let t = Tensor::from_vec(&entry.shape, data).map_err(|e| Error::Checkpoint {
                name: entry.name.clone(),
                msg: e.to_string(),
            })?;
            store.set_value(id, t)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|source| Error::Json {
            context: "checkpoint".into(),
            source,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Json {
            context: "checkpoint".into(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }
}
