//! Experiment configuration: one JSON document naming the model, the
//! training and augmentation settings and the datasets per role.
//!
//! A dataset entry is either a tile-store directory (written by `prep`)
//! or a manifest file, which is tiled on load with the `tiling` settings.
//! Training roles read the manifest's `train` split, the eval role its
//! `test` split.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::datasets::{parse_manifest, prepare_split, Role, TileSample, TileStore};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TilingConfig {
    pub tile_size: u32,
    pub stride: u32,
    /// Ground resolution tiles are harmonized to; `None` keeps the
    /// manifest's own.
    #[serde(default)]
    pub target_resolution_m_per_px: Option<f64>,
}

impl Default for TilingConfig {
    fn default() -> Self {
        TilingConfig {
            tile_size: 512,
            stride: 512,
            target_resolution_m_per_px: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    #[serde(default)]
    pub tiling: TilingConfig,
    pub datasets: BTreeMap<Role, PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            tiling: TilingConfig::default(),
            datasets: BTreeMap::new(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Tiles of one dataset role, ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub name: String,
    pub resolution_m_per_px: f64,
    pub samples: Vec<TileSample>,
}

impl ExperimentConfig {
    /// Parses a config file. Malformed values are reported with their key.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            key: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "{}: schema_version {} is not supported (expected {SCHEMA_VERSION})",
                path.display(),
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Short content hash of the resolved configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).unwrap_or_default();
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        if self.tiling.tile_size == 0 || self.tiling.stride == 0 {
            return Err(Error::validation("tiling.tile_size and tiling.stride must be positive"));
        }
        if let Some(r) = self.tiling.target_resolution_m_per_px {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::validation("tiling.target_resolution_m_per_px must be positive"));
            }
        }
        Ok(())
    }

    /// Makes relative dataset paths absolute against `root`.
    pub fn resolve_paths(&mut self, root: &Path) {
        for p in self.datasets.values_mut() {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        }
    }

    /// Applies a seed override to both the weight init and the sampler.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn dataset_path(&self, role: Role) -> Result<&Path> {
        self.datasets
            .get(&role)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::Config(format!("no dataset configured for role {}", role.as_str())))
    }

    pub fn load_dataset(&self, role: Role) -> Result<LoadedDataset> {
        let split = if role == Role::Eval { "test" } else { "train" };
        load_dataset_at(self.dataset_path(role)?, split, &self.tiling)
    }
}

/// Loads a tile store directory, or tiles one split of a manifest.
pub fn load_dataset_at(path: &Path, split: &str, tiling: &TilingConfig) -> Result<LoadedDataset> {
    if path.is_dir() {
        let store = TileStore::open(path)?;
        let idx = store.index();
        return Ok(LoadedDataset {
            name: idx.dataset.clone(),
            resolution_m_per_px: idx.resolution_m_per_px,
            samples: store.load_all()?,
        });
    }
    let manifest = parse_manifest(path)?;
    let res = tiling
        .target_resolution_m_per_px
        .unwrap_or(manifest.resolution_m_per_px);
    Ok(LoadedDataset {
        name: manifest.name.clone(),
        resolution_m_per_px: res,
        samples: prepare_split(&manifest, split, res, tiling.tile_size, tiling.stride)?,
    })
}
