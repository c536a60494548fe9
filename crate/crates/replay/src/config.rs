//! TOML server configuration.

use crate::rate_limiter::{RateLimiterConfig, RateLimiterError};
use crate::selector::SelectorConfig;
use crate::table::TableConfig;
use crate::wire::DEFAULT_MAX_FRAME_BYTES;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config must declare at least one table")]
    NoTables,
    #[error("duplicate table name {0:?}")]
    DuplicateTable(String),
    #[error("table {table:?}: {source}")]
    Limiter {
        table: String,
        source: RateLimiterError,
    },
}

/// Rate limiter presets as written in config files. `custom` exposes the
/// raw diff bounds for anything the presets cannot express.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum LimiterSpec {
    MinSize {
        min_size: u64,
    },
    Queue {
        queue_size: u64,
    },
    SampleToInsertRatio {
        min_size: u64,
        samples_per_insert: f64,
        error_buffer: f64,
    },
    Custom {
        min_size: u64,
        samples_per_insert: f64,
        min_diff: f64,
        max_diff: f64,
    },
}

impl Default for LimiterSpec {
    fn default() -> Self {
        LimiterSpec::MinSize { min_size: 1 }
    }
}

impl LimiterSpec {
    pub fn build(&self) -> Result<RateLimiterConfig, RateLimiterError> {
        match *self {
            LimiterSpec::MinSize { min_size } => Ok(RateLimiterConfig::min_size(min_size)),
            LimiterSpec::Queue { queue_size } => RateLimiterConfig::queue(queue_size),
            LimiterSpec::SampleToInsertRatio {
                min_size,
                samples_per_insert,
                error_buffer,
            } => RateLimiterConfig::sample_to_insert_ratio(
                min_size,
                samples_per_insert,
                error_buffer,
            ),
            LimiterSpec::Custom {
                min_size,
                samples_per_insert,
                min_diff,
                max_diff,
            } => RateLimiterConfig::new(min_size, samples_per_insert, min_diff, max_diff),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableSpec {
    pub name: String,
    #[serde(default = "SelectorConfig::uniform")]
    pub sampler: SelectorConfig,
    #[serde(default = "SelectorConfig::fifo")]
    pub remover: SelectorConfig,
    pub max_size: u64,
    /// 0 = unlimited.
    #[serde(default)]
    pub max_times_sampled: u32,
    #[serde(default)]
    pub rate_limiter: LimiterSpec,
    #[serde(default = "default_seed")]
    pub rng_seed: u64,
}

fn default_seed() -> u64 {
    0
}

impl TableSpec {
    pub fn build(&self) -> Result<TableConfig, ConfigError> {
        Ok(TableConfig {
            name: self.name.clone(),
            sampler: self.sampler,
            remover: self.remover,
            max_size: self.max_size,
            max_times_sampled: self.max_times_sampled,
            rate_limiter: self.rate_limiter.build().map_err(|source| {
                ConfigError::Limiter {
                    table: self.name.clone(),
                    source,
                }
            })?,
            signature: None,
            rng_seed: self.rng_seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Directory for checkpoint files; checkpointing is disabled when unset.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Number of most-recent checkpoints retained on disk.
    #[serde(default = "default_keep")]
    pub checkpoint_keep: usize,
    #[serde(default = "default_max_frame")]
    pub max_frame_bytes: u32,
    #[serde(rename = "table", default)]
    pub tables: Vec<TableSpec>,
}

fn default_listen() -> String {
    "127.0.0.1:7878".into()
}

fn default_keep() -> usize {
    1
}

fn default_max_frame() -> u32 {
    DEFAULT_MAX_FRAME_BYTES
}

impl ServerConfig {
    pub fn from_str(text: &str) -> Result<ServerConfig, ConfigError> {
        let mut config: ServerConfig = toml::from_str(text)?;
        config.apply_env();
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<ServerConfig, ConfigError> {
        ServerConfig::from_str(&std::fs::read_to_string(path)?)
    }

    /// `REPLAY_LISTEN` overrides the configured listen address.
    fn apply_env(&mut self) {
        if let Ok(listen) = std::env::var("REPLAY_LISTEN") {
            if !listen.is_empty() {
                self.listen = listen;
            }
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.tables.is_empty() {
            return Err(ConfigError::NoTables);
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.tables {
            if !seen.insert(&t.name) {
                return Err(ConfigError::DuplicateTable(t.name.clone()));
            }
            t.build()?;
        }
        Ok(())
    }

    pub fn table_configs(&self) -> Result<Vec<TableConfig>, ConfigError> {
        self.tables.iter().map(|t| t.build()).collect()
    }
}
