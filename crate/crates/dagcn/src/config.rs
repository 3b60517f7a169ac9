//! Run configuration: one human-editable TOML file covering training,
//! model, dataset location, and output directory. Every field has a
//! default, so an empty file is a valid configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding TU-format datasets (each in a NAME/ subdirectory
    /// or directly as NAME_*.txt files).
    pub dataset_dir: PathBuf,
    /// Dataset name, e.g. "MUTAG".
    pub dataset: String,
    /// Output directory for reports, traces, and checkpoints.
    pub out_dir: PathBuf,
    /// Fold-parallel training threads; 1 preserves strict sequencing
    /// (results are identical either way).
    pub jobs: usize,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_dir: PathBuf::from("data"),
            dataset: "MUTAG".into(),
            out_dir: PathBuf::from("runs"),
            jobs: 1,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        config.train.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }
}
