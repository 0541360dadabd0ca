//! The structured-text run configuration: optional `[dataset]` and `[train]`
//! tables. Every command writes the configuration it actually used beside
//! its outputs in this format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::DatasetConfig;
use crate::error::{Error, Result};
use crate::training::TrainConfig;

/// How a command was invoked.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommandSpec {
    pub name: String,
    pub config_path: Option<String>,
    /// Command-line arguments as given.
    pub overrides: Vec<String>,
    pub output_dir: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<CommandSpec>,
    pub dataset: Option<DatasetConfig>,
    pub train: Option<TrainConfig>,
}

impl RunConfig {
    pub fn for_dataset(cfg: &DatasetConfig) -> Self {
        Self {
            dataset: Some(cfg.clone()),
            ..Default::default()
        }
    }

    pub fn for_training(cfg: &TrainConfig) -> Self {
        Self {
            train: Some(cfg.clone()),
            ..Default::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(d) = &cfg.dataset {
            d.validate()?;
        }
        if let Some(t) = &cfg.train {
            t.validate()?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}
