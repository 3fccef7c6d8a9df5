//! Run configuration file. TOML with one table per stage; every key is
//! optional and unknown keys are rejected.
//!
//! ```toml
//! [dataset]
//! seed = 2024
//! scenes = 60
//! full3d_fraction = 0.3333333333333333
//!
//! [scene]
//! rig = "nuscenes"
//! image_scale = 0.25
//!
//! [noise]
//! center_sigma = 0.5
//!
//! [train]
//! epochs = 8
//! mix_ratio = 0.5
//!
//! [metrics]
//! thresholds = [0.5, 1.0, 2.0, 4.0]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::finetune::{TrainConfig, TrainError};
use crate::metrics::MetricConfig;
use crate::scenegen::{NoiseConfig, SceneConfig, SceneError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl From<SceneError> for ConfigError {
    fn from(e: SceneError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

impl From<TrainError> for ConfigError {
    fn from(e: TrainError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

/// Dataset size and labelling split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub scenes: usize,
    /// Fraction of scenes that carry 3D labels.
    pub full3d_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 60,
            full3d_fraction: 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub scene: SceneConfig,
    /// Error model of the initial detector.
    pub noise: NoiseConfig,
    pub train: TrainConfig,
    pub metrics: MetricConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(e),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    /// Defaults when `path` is `None`.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ConfigError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.dataset.scenes == 0 {
            return Err(ConfigError::Invalid("dataset needs at least one scene".into()));
        }
        if !(0.0..=1.0).contains(&self.dataset.full3d_fraction) {
            return Err(ConfigError::Invalid(format!(
                "full3d_fraction {} outside [0, 1]",
                self.dataset.full3d_fraction
            )));
        }
        self.scene.validate()?;
        self.noise.validate()?;
        self.train.validate()?;
        self.metrics.validate().map_err(ConfigError::Invalid)?;
        Ok(())
    }
}
