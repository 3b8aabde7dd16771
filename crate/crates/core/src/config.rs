//! Run configuration files.
//!
//! ```toml
//! [data]      # synthetic benchmark
//! seed = 0
//! [encoder]
//! hidden_dims = [64, 64]
//! embed_dim = 32
//! [augment]
//! noise_sigma = 0.5
//! [train]
//! variant = "PAL"
//! epochs = 30
//! [eval]
//! episodes = 600
//! ```
//!
//! Every section and key is optional; unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::batching::AugmentConfig;
use crate::data::SyntheticSpec;
use crate::encoder::EncoderConfig;
use crate::error::{PalError, Result};
use crate::eval::EpisodeSpec;
use crate::train::TrainConfig;

/// Environment variable that replaces `train.seed` when set.
pub const SEED_ENV: &str = "PAL_SEED";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let c = EncoderConfig::new(1, 0);
        Self { hidden_dims: c.hidden_dims, embed_dim: c.embed_dim }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n: usize,
    pub k: usize,
    pub q: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EpisodeSpec::default();
        Self { n: e.n, k: e.k, q: e.q, episodes: e.episodes, seed: 0 }
    }
}

impl EvalSection {
    pub fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec { n: self.n, k: self.k, q: self.q, episodes: self.episodes }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub encoder: EncoderSection,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: SyntheticSpec::default(),
            encoder: EncoderSection::default(),
            augment: AugmentConfig::default(),
            train: TrainConfig::desk(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML text, applying `section.key=value` overrides on top.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| PalError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| PalError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or starts from defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => {
                std::fs::read_to_string(p).map_err(|e| PalError::Config(format!("cannot read {}: {e}", p.display())))?
            }
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    /// Replaces `train.seed` with the value of `PAL_SEED` if present.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| PalError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        self.eval.episode_spec().validate()?;
        self.encoder_config(self.data.raw_dim).validate()
    }

    pub fn encoder_config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden_dims: self.encoder.hidden_dims.clone(),
            embed_dim: self.encoder.embed_dim,
            seed: self.train.seed,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PalError::Config(e.to_string()))
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) =
        spec.split_once('=').ok_or_else(|| PalError::Config(format!("override {spec:?} is not section.key=value")))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| PalError::Config(format!("override key {path:?} is not section.key")))?;
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let entry = table.entry(section.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(sec) = entry else {
        return Err(PalError::Config(format!("{section} is not a section")));
    };
    sec.insert(key.to_string(), value);
    Ok(())
}
