use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LossRecord, Result, TrainConfig, TrainError, TrainState};
use crate::model::{ModelConfig, PgcModel};
use crate::prompt::{CategoryVocab, Prompter, Vocab};
use crate::tensor::StoredParams;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Hex SHA-256 of the canonical JSON form of `config`.
pub fn config_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_string(config).expect("model config serializes");
    Sha256::digest(json.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub config_hash: String,
    pub params: StoredParams,
    pub vocab: Vocab,
    pub categories: CategoryVocab,
    pub train_config: TrainConfig,
    pub state: TrainState,
    pub loss_curve: Vec<LossRecord>,
}

impl Checkpoint {
    pub fn new(
        model: &PgcModel,
        vocab: &Vocab,
        categories: &CategoryVocab,
        train_config: TrainConfig,
        state: TrainState,
        loss_curve: Vec<LossRecord>,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config_hash: config_hash(&model.config),
            model_config: model.config.clone(),
            params: model.store.to_stored(),
            vocab: vocab.clone(),
            categories: categories.clone(),
            train_config,
            state,
            loss_curve,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|source| TrainError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, json).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let ckpt: Self = serde_json::from_str(&text).map_err(|source| TrainError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Loads and additionally requires `expected` as the model config.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if &ckpt.model_config != expected {
            return Err(TrainError::ConfigMismatch {
                expected: Box::new(expected.clone()),
                found: Box::new(ckpt.model_config),
            });
        }
        Ok(ckpt)
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(TrainError::Version {
                found: self.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let expected = config_hash(&self.model_config);
        if self.config_hash != expected {
            return Err(TrainError::CorruptConfig {
                found: self.config_hash.clone(),
                expected,
            });
        }
        Ok(())
    }

    /// Rebuilds the model, including optimizer moments and step count.
    pub fn to_model(&self) -> Result<PgcModel> {
        let mut model = PgcModel::new(self.model_config.clone(), 0)?;
        model.store.load_stored(&self.params)?;
        Ok(model)
    }

    pub fn prompter(&self) -> Prompter {
        Prompter::new(self.train_config.prompt_version, self.categories.clone())
    }
}
