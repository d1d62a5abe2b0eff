//! Runtime configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::DEFAULT_K;
use crate::ussd::gateway::{GatewayConfig, DEFAULT_SHORTCODE};

pub use crate::persist::KEY_ENV;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub store_dir: PathBuf,
    pub http_port: u16,
    pub gateway_port: u16,
    pub shortcode: String,
    pub session_timeout_s: u64,
    pub suppression_k: u32,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            store_dir: PathBuf::from("store"),
            http_port: 8080,
            gateway_port: 8384,
            shortcode: DEFAULT_SHORTCODE.into(),
            session_timeout_s: 90,
            suppression_k: DEFAULT_K,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let cfg: Config = serde_json::from_slice(&raw).map_err(|source| ConfigError::Parse {
            path: path.to_owned(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.suppression_k == 0 {
            return Err(ConfigError::Invalid("suppression_k must be at least 1".into()));
        }
        if self.session_timeout_s == 0 {
            return Err(ConfigError::Invalid("session_timeout_s must be positive".into()));
        }
        if self.shortcode.trim().is_empty() {
            return Err(ConfigError::Invalid("shortcode is empty".into()));
        }
        Ok(())
    }

    pub fn gateway(&self) -> GatewayConfig {
        GatewayConfig {
            shortcode: self.shortcode.clone(),
            session_timeout_ms: self.session_timeout_s * 1000,
        }
    }
}
