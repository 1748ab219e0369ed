use std::path::Path;

use geofm::data::DatasetSpec;
use geofm::eval::FeatureSource;
use geofm::trainer::{Branch, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// JSON schema of [`Config`], published next to the crate.
pub const SCHEMA: &str = include_str!("../config.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Neighbors for `eval-knn`.
    pub k: usize,
    pub branch: Branch,
    pub source: FeatureSource,
    pub batch_size: usize,
    /// Views drawn for `dump-attn`: 2 globals plus this many locals.
    pub attn_local_views: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 20, branch: Branch::Teacher, source: FeatureSource::Fused, batch_size: 16, attn_local_views: 6 }
    }
}

/// Top-level configuration file. Every section is optional and defaults to
/// the toy settings; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let cfg: Config = serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |r: geofm::Result<()>, section: &str| r.map_err(|e| ConfigError(format!("{section}: {e}")));
        check(self.dataset.validate(), "dataset")?;
        check(self.model.validate(), "model")?;
        check(self.train.validate(), "train")?;
        if self.model.num_classes != self.dataset.num_classes {
            return Err(ConfigError(format!(
                "model.num_classes {} differs from dataset.num_classes {}",
                self.model.num_classes, self.dataset.num_classes
            )));
        }
        if self.eval.k == 0 || self.eval.batch_size == 0 || self.eval.attn_local_views == 0 {
            return Err(ConfigError("eval.k, eval.batch_size and eval.attn_local_views must be at least 1".into()));
        }
        Ok(())
    }
}
