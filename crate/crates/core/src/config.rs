//! Run configuration files.
//!
//! ```json
//! {
//!   "model": { "kind": "early_exit", "layer": "linear", "widths": [32, 32, 32, 32] },
//!   "data": {
//!     "source": { "type": "synthetic", "kind": "spirals", "n_per_class": 1200, "classes": 3, "noise": 0.2 },
//!     "val_fraction": 0.1667
//!   },
//!   "train": { "epochs": 30, "batch_size": 64 },
//!   "distill": { "strategy": "TAM", "tau": 1.0, "lambda": 0.8 },
//!   "output_dir": "runs/spirals"
//! }
//! ```
//!
//! Unknown keys are rejected everywhere. Relative data paths are resolved
//! against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, load_csv, load_idx, make_glyphs, make_synthetic, Dataset, GlyphOptions, SyntheticKind};
use crate::error::{Error, Result};
use crate::losses::DistillConfig;
use crate::models::ModelConfig;
use crate::scalar::Scalar;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        kind: SyntheticKind,
        n_per_class: usize,
        classes: usize,
        #[serde(default)]
        noise: f64,
    },
    /// Seven-segment digit images generated in memory (10 classes).
    Glyphs {
        n_per_class: usize,
        #[serde(default = "default_glyph_size")]
        size: usize,
        #[serde(default = "default_glyph_noise")]
        noise: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        classes: usize,
    },
}

fn default_glyph_size() -> usize {
    GlyphOptions::default().size
}

fn default_glyph_noise() -> f64 {
    GlyphOptions::default().noise
}

fn default_val_fraction() -> f64 {
    0.2
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Seeds generation and the train/validation split. Independent of the
    /// training seed, so every training seed sees the same split.
    #[serde(default)]
    pub seed: u64,
    /// Standardise features with train-split statistics.
    #[serde(default = "default_true")]
    pub normalize: bool,
}

impl DataConfig {
    /// Loads or generates the data and returns `(train, validation)`.
    pub fn load<T: Scalar>(&self) -> Result<(Dataset<T>, Dataset<T>)> {
        let full: Dataset<T> = match &self.source {
            DataSource::Synthetic {
                kind,
                n_per_class,
                classes,
                noise,
            } => make_synthetic(*kind, *n_per_class, *classes, *noise, self.seed)?,
            DataSource::Glyphs { n_per_class, size, noise } => make_glyphs(
                *n_per_class,
                GlyphOptions {
                    size: *size,
                    noise: *noise,
                },
                self.seed,
            )?
            .to_dataset()?,
            DataSource::Idx { images, labels } => load_idx(images, labels)?,
            DataSource::Csv {
                path,
                label_column,
                classes,
            } => load_csv(path, label_column, *classes)?,
        };
        let (train, val) = data::split(&full, self.val_fraction, self.seed)?;
        if !self.normalize {
            return Ok((train, val));
        }
        let norm = train.fit_normalization();
        Ok((train.normalized(&norm)?, val.normalized(&norm)?))
    }

    fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("data.val_fraction", "must lie in (0, 1)"));
        }
        match &self.source {
            DataSource::Synthetic {
                n_per_class,
                classes,
                noise,
                ..
            } => {
                if *n_per_class == 0 {
                    return Err(Error::config("data.source.n_per_class", "must be >= 1"));
                }
                if *classes < 2 {
                    return Err(Error::config("data.source.classes", "must be >= 2"));
                }
                if !(*noise >= 0.0) {
                    return Err(Error::config("data.source.noise", "must be >= 0"));
                }
            }
            DataSource::Glyphs { n_per_class, size, noise } => {
                if *n_per_class == 0 {
                    return Err(Error::config("data.source.n_per_class", "must be >= 1"));
                }
                if *size < 8 {
                    return Err(Error::config("data.source.size", "must be >= 8"));
                }
                if !(*noise >= 0.0) {
                    return Err(Error::config("data.source.noise", "must be >= 0"));
                }
            }
            DataSource::Csv { classes, .. } if *classes < 2 => {
                return Err(Error::config("data.source.classes", "must be >= 2"));
            }
            _ => {}
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.source {
            DataSource::Idx { images, labels } => {
                fix(images);
                fix(labels);
            }
            DataSource::Csv { path, .. } => fix(path),
            _ => {}
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        self.distill.validate("distill")?;
        let n = self.model.num_submodels();
        if self.distill.strategy != crate::losses::Strategy::None && n < 2 {
            return Err(Error::config(
                "distill.strategy",
                format!("{} needs at least 2 sub-models, model has {n}", self.distill.strategy),
            ));
        }
        Ok(())
    }

    /// Copy with every default made explicit.
    pub fn resolved(&self) -> Self {
        Self {
            train: self.train.resolved(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            context: "run config".into(),
            source: e,
        })
    }
}
