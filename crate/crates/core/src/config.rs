//! Run configuration: one TOML document, strict keys, dotted overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::{Decode, EnvConfig, TrainConfig};
use crate::pipeline::PipelineConfig;
use crate::rewards::RewardConfig;
use crate::scenes::{EpisodeConfig, SceneConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("override `{0}` must look like key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Questions generated by `gen-scenes` unless `--count` is given.
    pub count: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { count: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CloneConfig {
    pub lr: f64,
    pub epochs: usize,
}

impl Default for CloneConfig {
    fn default() -> Self {
        Self { lr: 0.5, epochs: 300 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub decode: Decode,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            decode: Decode::Greedy,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Root seed for scene generation and data generation.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub scenes: SceneConfig,
    pub episode: EpisodeConfig,
    pub rewards: RewardConfig,
    pub pipeline: PipelineConfig,
    pub clone: CloneConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn env(&self) -> EnvConfig {
        EnvConfig {
            episode: self.episode,
            rewards: self.rewards,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.scenes.validate().map_err(|e| invalid(e.to_string()))?;
        self.rewards.weights.validate().map_err(|e| invalid(e.to_string()))?;
        self.train.validate().map_err(|e| invalid(e.to_string()))?;
        if self.episode.round_limit == 0 {
            return Err(invalid("episode.round_limit must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.episode.redundancy_iou) {
            return Err(invalid("episode.redundancy_iou must lie in [0, 1]".into()));
        }
        let o = &self.pipeline.oracle;
        if !(0.0..=1.0).contains(&o.noise) || !(0.0..=1.0).contains(&o.malformed_rate) {
            return Err(invalid("pipeline.oracle probabilities must lie in [0, 1]".into()));
        }
        if self.pipeline.qc_threshold > 5 {
            return Err(invalid("pipeline.qc_threshold must be at most 5".into()));
        }
        if !(self.clone.lr.is_finite() && self.clone.lr > 0.0) {
            return Err(invalid("clone.lr must be positive".into()));
        }
        Ok(())
    }

    /// Apply `key=value` overrides; keys are dotted paths into the document
    /// and values are TOML literals (bare words are taken as strings).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut doc = toml::Value::try_from(self).expect("config serializes");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.to_owned()))?;
            let key = key.trim();
            let slot = key
                .split('.')
                .try_fold(&mut doc, |node, part| node.as_table_mut().and_then(|t| t.get_mut(part)))
                .ok_or_else(|| ConfigError::UnknownKey(key.to_owned()))?;
            if slot.is_table() {
                return Err(ConfigError::BadOverride(format!("{key} is a section, not a value")));
            }
            *slot = parse_literal(raw.trim());
        }
        let cfg: Config = doc
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

/// Every leaf key of the default configuration with its default value.
pub fn default_keys() -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
        match v {
            toml::Value::Table(t) => {
                for (k, child) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            leaf => out.push((prefix.to_owned(), leaf.to_string())),
        }
    }
    let mut out = Vec::new();
    walk("", &toml::Value::try_from(Config::default()).expect("config serializes"), &mut out);
    out
}
