//! Declarative run configuration. Every field has a default; unknown keys are
//! rejected so typos surface as usage errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spikeseg::{ModelConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of training volumes.
    pub train: Option<PathBuf>,
    /// Directory of validation volumes used to keep the best checkpoint.
    pub val: Option<PathBuf>,
    /// Centered crop applied before normalization; `null` keeps the full extent.
    pub crop: Option<[usize; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub view: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            view: None,
            out: None,
            seed: 42,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}
