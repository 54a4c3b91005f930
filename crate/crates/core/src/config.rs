//! Engine configuration file (JSON or TOML).
//!
//! Every section and field is optional; missing values take the defaults
//! documented on each type.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mock::MockModelConfig;
use crate::pager::PoolConfig;
use crate::scheduler::SchedulerConfig;
use crate::token::CodebookConfig;
use crate::vocoder::VocoderConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing JSON config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("parsing TOML config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn default_capacity_units() -> usize {
    32_768
}
fn default_watermark() -> f64 {
    0.9
}

/// Prefix-cache sizing, in key-units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    #[serde(default = "default_capacity_units")]
    pub capacity_units: usize,
    /// Under KV-pool pressure the cache is evicted down to this fraction of
    /// its capacity before any request is preempted.
    #[serde(default = "default_watermark")]
    pub evict_watermark: f64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self { capacity_units: default_capacity_units(), evict_watermark: default_watermark() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default)]
    pub codebook: CodebookConfig,
    #[serde(default)]
    pub model: MockModelConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub vocoder: VocoderConfig,
    #[serde(default)]
    pub pool: PoolConfig,
    #[serde(default)]
    pub cache: CacheConfig,
}

impl EngineConfig {
    /// Loads by extension: `.toml` is TOML, anything else JSON.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let cfg = if path.extension().is_some_and(|e| e == "toml") {
            Self::from_toml(&text)?
        } else {
            Self::from_json(&text)?
        };
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: String| ConfigError::Invalid(e);
        self.codebook.validate().map_err(|e| inv(e.to_string()))?;
        self.model.validate().map_err(|e| inv(e.to_string()))?;
        self.scheduler.validate().map_err(inv)?;
        if self.vocoder.first_chunk_frames == 0 || self.vocoder.steady_chunk_frames == 0 {
            return Err(inv("vocoder chunk sizes must be >= 1".into()));
        }
        if self.pool.page_size == 0 || self.pool.total_blocks == 0 {
            return Err(inv("pool.page_size and pool.total_blocks must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.cache.evict_watermark) {
            return Err(inv("cache.evict_watermark must be in [0, 1]".into()));
        }
        Ok(())
    }
}
