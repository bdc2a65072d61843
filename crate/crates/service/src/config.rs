use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use argus_core::debate::DebateConfig;
use argus_core::gateway::{BackendConfig, RoleBackendsConfig};
use argus_core::governance::GovernanceConfig;
use argus_core::reward::RewardConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("no backend configured for role {0} and no [backends.default] block")]
    MissingBackend(&'static str),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Backend blocks per role. A role without its own block uses `default`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendBlocks {
    #[serde(default)]
    pub default: Option<BackendConfig>,
    #[serde(default)]
    pub prosecutor: Option<BackendConfig>,
    #[serde(default)]
    pub defender: Option<BackendConfig>,
    #[serde(default)]
    pub skeptic: Option<BackendConfig>,
    #[serde(default)]
    pub umpire: Option<BackendConfig>,
    #[serde(default)]
    pub policy: Option<BackendConfig>,
}

impl BackendBlocks {
    pub fn resolve(&self) -> Result<RoleBackendsConfig, ConfigError> {
        let pick = |role: &'static str, block: &Option<BackendConfig>| {
            block
                .clone()
                .or_else(|| self.default.clone())
                .ok_or(ConfigError::MissingBackend(role))
        };
        Ok(RoleBackendsConfig {
            prosecutor: pick("prosecutor", &self.prosecutor)?,
            defender: pick("defender", &self.defender)?,
            skeptic: pick("skeptic", &self.skeptic)?,
            umpire: pick("umpire", &self.umpire)?,
            policy: pick("policy", &self.policy)?,
        })
    }
}

fn default_bind() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: SocketAddr,
    /// Sampling rate, seed, policy version and claim TTL.
    #[serde(flatten)]
    pub governance: GovernanceConfig,
    #[serde(default)]
    pub screening_rules_path: Option<PathBuf>,
    /// Policy catalog; the built-in catalog when absent.
    #[serde(default)]
    pub catalog_path: Option<PathBuf>,
    /// Dataset log receiving review gold samples; in memory when absent.
    #[serde(default)]
    pub store_path: Option<PathBuf>,
    /// Evidence index snapshot for review transcripts; built from the catalog when absent.
    #[serde(default)]
    pub index_path: Option<PathBuf>,
    /// Decision log written on shutdown.
    #[serde(default)]
    pub decision_log_path: Option<PathBuf>,
    /// Environment variable holding the static bearer token. No auth when absent.
    #[serde(default)]
    pub bearer_token_env: Option<String>,
    /// Attach a debate transcript to every ad routed to review.
    #[serde(default = "yes")]
    pub review_transcripts: bool,
    /// HTTP runtime threads; the tokio default when absent.
    #[serde(default)]
    pub http_workers: Option<usize>,
    #[serde(default)]
    pub debate: DebateConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub backends: BackendBlocks,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: default_bind(),
            governance: GovernanceConfig::default(),
            screening_rules_path: None,
            catalog_path: None,
            store_path: None,
            index_path: None,
            decision_log_path: None,
            bearer_token_env: None,
            review_transcripts: true,
            http_workers: None,
            debate: DebateConfig::default(),
            reward: RewardConfig::default(),
            backends: BackendBlocks::default(),
        }
    }
}

impl ServiceConfig {
    /// All roles on one scripted backend.
    pub fn scripted(seed: u64) -> Self {
        ServiceConfig {
            backends: BackendBlocks {
                default: Some(BackendConfig::scripted(seed)),
                ..BackendBlocks::default()
            },
            ..ServiceConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: "<inline>".into(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.governance.validate().map_err(|e| invalid(&e))?;
        self.debate.validate().map_err(|e| invalid(&e))?;
        self.reward.validate().map_err(|e| invalid(&e))?;
        for b in [
            &self.backends.default,
            &self.backends.prosecutor,
            &self.backends.defender,
            &self.backends.skeptic,
            &self.backends.umpire,
            &self.backends.policy,
        ]
        .into_iter()
        .flatten()
        {
            b.validate().map_err(|e| invalid(&e))?;
        }
        self.backends.resolve()?;
        if self.http_workers == Some(0) {
            return Err(ConfigError::Invalid("http_workers must be positive".into()));
        }
        Ok(())
    }
}
