//! Pipeline configuration file with `[data]`, `[fol]`, `[train]` and
//! `[eval]` sections. Missing keys take the desk-scale defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MeaError, Result};
use crate::fol::FolTrainConfig;
use crate::microgen::{DEFAULT_K_IN, DEFAULT_K_OUT};
use crate::models::{TrainConfig, UpscalerKind};

/// Default artifact directory when `MEA_DATA_DIR` is unset.
pub const DEFAULT_DATA_DIR: &str = "mea-data";
pub const DATA_DIR_ENV: &str = "MEA_DATA_DIR";

pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Samples used for training; the generated set is truncated to this.
    pub samples: usize,
    pub seed: u64,
    pub k_in: f64,
    pub k_out: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            samples: 2000,
            seed: 0,
            k_in: DEFAULT_K_IN,
            k_out: DEFAULT_K_OUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FolSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for FolSection {
    fn default() -> Self {
        let d = FolTrainConfig::default();
        Self {
            epochs: d.epochs,
            lr: d.lr,
            batch: d.batch,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoarseSource {
    Fol,
    Fem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    /// Per-kind default (FFNN 100, others 50) when absent.
    pub batch: Option<usize>,
    pub lr: f64,
    pub seed: u64,
    pub concat: u8,
    pub coarse: CoarseSource,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: None,
            lr: 1e-4,
            seed: 0,
            concat: 4,
            coarse: CoarseSource::Fol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub interp_order: u8,
    pub warmup: usize,
    pub repeats: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            interp_order: 3,
            warmup: 3,
            repeats: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataSection,
    pub fol: FolSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl PipelineConfig {
    /// The full-size run: every generated sample and 500 epochs.
    pub fn paper_scale() -> Self {
        let mut c = Self::default();
        c.data.samples = 5670;
        c.train.epochs = 500;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| MeaError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| MeaError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MeaError::Config(m.to_string()));
        if self.data.samples < 2 {
            return bad("data.samples must be at least 2");
        }
        if !(self.data.k_in > 0.0 && self.data.k_out > 0.0) {
            return bad("conductivities must be positive");
        }
        if self.fol.epochs == 0 || self.fol.batch == 0 || !(self.fol.lr > 0.0) {
            return bad("fol epochs, batch and lr must be positive");
        }
        if self.train.epochs == 0 || self.train.batch == Some(0) || !(self.train.lr > 0.0) {
            return bad("train epochs, batch and lr must be positive");
        }
        if !(1..=4).contains(&self.train.concat) {
            return bad("train.concat must be 1..=4");
        }
        if ![0, 1, 3].contains(&self.eval.interp_order) || self.eval.repeats == 0 {
            return bad("eval.interp_order must be 0, 1 or 3 and repeats positive");
        }
        Ok(())
    }

    pub fn fol_config(&self, dataset_hash: &str) -> FolTrainConfig {
        FolTrainConfig {
            epochs: self.fol.epochs,
            lr: self.fol.lr,
            batch: self.fol.batch,
            seed: self.fol.seed,
            dataset_hash: dataset_hash.to_string(),
        }
    }

    pub fn train_config(&self, kind: UpscalerKind, dataset_hash: &str) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch: self.train.batch.unwrap_or(kind.default_batch()),
            lr: self.train.lr,
            seed: self.train.seed,
            dataset_hash: dataset_hash.to_string(),
        }
    }
}
