//! Run configuration read from sectioned TOML.
//!
//! Every key is optional. A user file is overlaid on the defaults, so a
//! file only lists what it changes; unknown keys are rejected by name.
//! `[model] preset = "tiny"` swaps the base model before the overlay.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    /// Boxes per generated scene.
    pub boxes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub learning_rate: f64,
    /// Global gradient-norm cap; `0` disables clipping.
    pub clip_norm: f64,
    pub depth_warmup: usize,
    /// Training scenes per batch.
    pub scenes: usize,
    /// Held-out evaluation scenes.
    pub held_out: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    /// One full grid per seed.
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub scene: SceneSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub loss: LossWeights,
    pub ablate: AblateSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            scene: SceneSection { boxes: 6 },
            model: ModelConfig::desk(),
            train: TrainSection {
                steps: 300,
                learning_rate: 1e-2,
                clip_norm: 5.0,
                depth_warmup: 0,
                scenes: 4,
                held_out: 8,
            },
            loss: LossWeights::default(),
            ablate: AblateSection { seeds: vec![0, 1, 2] },
        }
    }
}

fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

impl Config {
    /// Parses `text`; `origin` labels diagnostics.
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let mut user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::parse(origin, e.to_string()))?;
        let preset = match user.get_mut("model").and_then(|m| m.as_table_mut()).and_then(|m| m.remove("preset")) {
            None => None,
            Some(toml::Value::String(s)) => Some(s),
            Some(other) => return Err(Error::parse(origin, format!("`model.preset` must be a string, got {other}"))),
        };
        let mut defaults = Config::default();
        match preset.as_deref() {
            None | Some("desk") => {}
            Some("tiny") => defaults.model = ModelConfig::tiny(),
            Some(other) => return Err(Error::parse(origin, format!("unknown `model.preset` \"{other}\" (expected desk or tiny)"))),
        }
        let mut base = toml::Table::try_from(&defaults).map_err(|e| Error::parse(origin, e.to_string()))?;
        overlay(&mut base, user);
        let cfg: Config = base.try_into().map_err(|e: toml::de::Error| Error::parse(origin, e.to_string()))?;
        cfg.validate().map_err(|e| Error::parse(origin, e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train_config().validate()?;
        if self.train.scenes == 0 {
            return Err(Error::Domain("train.scenes must be ≥ 1".into()));
        }
        if self.ablate.seeds.is_empty() {
            return Err(Error::Domain("ablate.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            learning_rate: self.train.learning_rate,
            seed: self.seed,
            weights: self.loss,
            clip_norm: (self.train.clip_norm > 0.0).then_some(self.train.clip_norm),
            depth_warmup: self.train.depth_warmup,
            model: self.model.clone(),
        }
    }
}
