//! The single JSON run document shared by every CLI command.
//!
//! Precedence is flags > file > defaults. The master seed additionally
//! falls back to `PATTERNID_SEED` when neither a flag nor the file sets it,
//! and feeds the dataset, training and protocol seeds unless a section sets
//! its own.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::evaluation::EvalProtocolConfig;
use crate::mining::{BatchSpec, MiningConfig};
use crate::net::{AdamConfig, ModelConfig};
use crate::synth::{AugmentationLevel, DatasetConfig};
use crate::trainer::{LrSchedule, TrainConfig, DEFAULT_LEARNING_RATE};

pub const SEED_ENV: &str = "PATTERNID_SEED";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{file}: at `{path}`: {message}")]
    Schema { file: String, path: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub seed: Option<u64>,
    pub batch: BatchSpec,
    pub augmentation: AugmentationLevel,
    pub optimizer: AdamConfig,
    pub lr_schedule: LrSchedule,
    pub eval_every: usize,
    pub fold: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            seed: None,
            batch: t.batch,
            augmentation: t.augmentation,
            optimizer: AdamConfig {
                learning_rate: DEFAULT_LEARNING_RATE,
                ..AdamConfig::default()
            },
            lr_schedule: t.lr_schedule,
            eval_every: t.eval_every,
            fold: t.fold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset root (holds manifest.json).
    pub data_dir: PathBuf,
    /// Training outputs.
    pub run_dir: PathBuf,
    /// Defaults to `<run_dir>/model.pidm`.
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `<run_dir>/gallery.pidb`.
    pub database: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            run_dir: "run".into(),
            checkpoint: None,
            database: None,
        }
    }
}

impl PathsConfig {
    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.run_dir.join(crate::trainer::CHECKPOINT_FILE))
    }

    pub fn database(&self) -> PathBuf {
        self.database.clone().unwrap_or_else(|| self.run_dir.join("gallery.pidb"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub bind: String,
    /// Built review UI bundle, served at `/`.
    pub static_dir: Option<PathBuf>,
    /// Gallery images laid out as `<dir>/images/<individual>/<image>.pgm`;
    /// defaults to the dataset root.
    pub images_dir: Option<PathBuf>,
    /// Uploaded query images awaiting a decision; defaults to
    /// `<run_dir>/pending`.
    pub pending_dir: Option<PathBuf>,
    pub pending_ttl_secs: u64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            static_dir: None,
            images_dir: None,
            pending_dir: None,
            pending_ttl_secs: 24 * 3600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed.
    pub seed: Option<u64>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub mining: MiningConfig,
    pub train: TrainSection,
    pub protocol: EvalProtocolConfig,
    pub paths: PathsConfig,
    pub serve: ServeConfig,
}

/// Which section seeds the file set explicitly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExplicitSeeds {
    pub dataset: bool,
    pub train: bool,
    pub protocol: bool,
}

impl ExplicitSeeds {
    fn from_value(v: &Value) -> Self {
        let has = |section: &str| v.get(section).and_then(|s| s.get("seed")).is_some_and(|s| !s.is_null());
        Self {
            dataset: has("dataset"),
            train: has("train"),
            protocol: has("protocol"),
        }
    }
}

impl RunConfig {
    /// Parses a run document, reporting the offending field path on schema
    /// errors.
    pub fn from_json(text: &str, origin: &str) -> Result<(Self, ExplicitSeeds), ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::Schema {
            file: origin.into(),
            path: ".".into(),
            message: e.to_string(),
        })?;
        let explicit = ExplicitSeeds::from_value(&value);
        let cfg: RunConfig = serde_path_to_error::deserialize(&value).map_err(|e| ConfigError::Schema {
            file: origin.into(),
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        Ok((cfg, explicit))
    }

    pub fn load(path: &Path) -> Result<(Self, ExplicitSeeds), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Loads `path` if given, otherwise defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<(Self, ExplicitSeeds), ConfigError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok((Self::default(), ExplicitSeeds::default())),
        }
    }

    /// Resolves the master seed (flag, then file, then environment, then 0)
    /// and pushes it into every section seed the file left unset.
    pub fn apply_seed(&mut self, flag: Option<u64>, explicit: ExplicitSeeds) -> Result<u64, ConfigError> {
        let env = match std::env::var(SEED_ENV) {
            Ok(s) => Some(
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| ConfigError::Invalid(format!("{SEED_ENV}: {s:?} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        let master = flag.or(self.seed).or(env).unwrap_or(0);
        self.seed = Some(master);
        if flag.is_some() || !explicit.dataset {
            self.dataset.seed = master;
        }
        if flag.is_some() || !explicit.train {
            self.train.seed = Some(master);
        }
        if flag.is_some() || !explicit.protocol {
            self.protocol.seed = master;
        }
        Ok(master)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            seed: self.train.seed.or(self.seed).unwrap_or(0),
            batch: self.train.batch,
            mining: self.mining.clone(),
            augmentation: self.train.augmentation,
            model: self.model.clone(),
            optimizer: self.train.optimizer,
            lr_schedule: self.train.lr_schedule,
            eval_every: self.train.eval_every,
            fold: self.train.fold,
            folds: self.dataset.folds,
            protocol: self.protocol.clone(),
        }
    }

    /// Semantic checks on every section.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.dataset.validate().map_err(|e| inv(&e))?;
        self.train_config().validate().map_err(|e| inv(&e))?;
        if self.serve.pending_ttl_secs == 0 {
            return Err(ConfigError::Invalid("serve.pending_ttl_secs: must be > 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_names_its_path() {
        let err = RunConfig::from_json(r#"{"train": {"stepz": 3}}"#, "cfg.json").unwrap_err();
        match err {
            ConfigError::Schema { path, message, .. } => {
                // "train" or "train.stepz", depending on how the map is visited
                assert!(path == "train" || path == "train.stepz", "{path}");
                assert!(message.contains("stepz"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let err = RunConfig::from_json(r#"{"model": {"embedding_dim": "big"}}"#, "cfg.json").unwrap_err();
        assert!(matches!(err, ConfigError::Schema { ref path, .. } if path == "model.embedding_dim"));
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text, "x").unwrap().0, c);
        assert_eq!(c.train_config().optimizer.learning_rate, DEFAULT_LEARNING_RATE);
    }

    #[test]
    fn semantic_errors_carry_field_names() {
        let (c, _) = RunConfig::from_json(r#"{"dataset": {"folds": 1}}"#, "x").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("folds"));
        let (c, _) = RunConfig::from_json(r#"{"train": {"steps": 0}}"#, "x").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("train.steps"));
    }

    #[test]
    fn seed_precedence() {
        // flag beats file beats section defaults
        let (mut c, ex) = RunConfig::from_json(r#"{"seed": 5, "protocol": {"seed": 9}}"#, "x").unwrap();
        assert_eq!(c.apply_seed(None, ex).unwrap(), 5);
        assert_eq!((c.dataset.seed, c.train_config().seed, c.protocol.seed), (5, 5, 9));
        let (mut c, ex) = RunConfig::from_json(r#"{"seed": 5}"#, "x").unwrap();
        assert_eq!(c.apply_seed(Some(7), ex).unwrap(), 7);
        assert_eq!((c.dataset.seed, c.train_config().seed, c.protocol.seed), (7, 7, 7));
    }
}
