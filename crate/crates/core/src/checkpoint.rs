//! Trained parameters together with the config that produced them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::marl::{Model, Params};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint was trained with an incompatible config ({found}, expected {expected})")]
    Incompatible { found: String, expected: String },
    #[error("{0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub config_hash: String,
    pub compat_hash: String,
    pub epochs_trained: u32,
    pub params: Params,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, epochs_trained: u32, params: Params) -> Self {
        Self {
            config: config.clone(),
            config_hash: config.hash(),
            compat_hash: config.compat_hash(),
            epochs_trained,
            params,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Accepts `config` if it differs from the training config only in
    /// run id, budget, seed or evaluation settings, and the parameters fit it.
    pub fn check_compatible(&self, config: &RunConfig) -> Result<(), CheckpointError> {
        let expected = config.compat_hash();
        if self.compat_hash != expected || self.config.compat_hash() != expected {
            return Err(CheckpointError::Incompatible {
                found: self.compat_hash.clone(),
                expected,
            });
        }
        Model::new(config)
            .check(&self.params)
            .map_err(|e| CheckpointError::Shape(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marl::trainer::initial_params;

    #[test]
    fn compatibility() {
        let config = RunConfig::default();
        let params = initial_params(&Model::new(&config), &config);
        let ck = Checkpoint::new(&config, 0, params);
        let mut scarce = config.clone();
        scarce.budget.episode_budget = 8;
        scarce.seed = 5;
        ck.check_compatible(&scarce).unwrap();
        let mut other = config.clone();
        other.training.beta = 0.0;
        assert!(matches!(
            ck.check_compatible(&other),
            Err(CheckpointError::Incompatible { .. })
        ));
        let back: Checkpoint = serde_json::from_str(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
    }
}
