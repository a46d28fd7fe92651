//! Pipeline configuration: a flat TOML file overlaid with `DOCSYNC_*`
//! environment variables.

use std::path::{Path, PathBuf};
use std::time::Duration;

use docsync_core::agent::{
    Gate, DEFAULT_MAX_RETRIES, DEFAULT_SOURCE_TOKEN_CAP, DEFAULT_TARGET_TOKEN_CAP,
};
use docsync_core::backend::BackendConfig;
use docsync_core::retrieval::{HashedBowEmbedder, DEFAULT_K, DEFAULT_MAX_CHARS, MIN_MAX_CHARS};
use serde::{Deserialize, Serialize};

pub const CONFIG_ENV: &str = "DOCSYNC_CONFIG";
pub const ENV_PREFIX: &str = "DOCSYNC_";
pub const DEFAULT_CONFIG_FILE: &str = "docsync.toml";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("environment variable {var}: {message}")]
    Env { var: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    DeterministicLocal,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticKind {
    Model,
    Rules,
}

/// Every configurable key, as it appears in the file. Optional endpoints
/// fall back to the generator's settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub api_key_env: String,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub timeout_secs: f64,
    pub max_retries_network: usize,

    pub critic: CriticKind,
    pub critic_endpoint_url: String,
    pub critic_model_name: String,

    pub judge_endpoint_url: String,
    pub judge_model_name: String,

    pub embedder: EmbedderKind,
    pub embedding_dimension: usize,
    pub embedding_endpoint_url: String,
    pub embedding_model: String,

    pub relevance_gate: Gate,
    pub language: String,
    pub max_retries: usize,
    pub retrieval_k: usize,
    pub chunk_max_chars: usize,
    pub source_token_cap: usize,
    pub target_token_cap: usize,
    pub seed: u64,
    /// Worker threads for per-case stages; 0 means one per CPU.
    pub workers: usize,
}

impl Default for FileConfig {
    fn default() -> Self {
        let backend = BackendConfig::default();
        Self {
            endpoint_url: backend.endpoint_url,
            model_name: backend.model_name,
            api_key_env: backend.api_key_env,
            max_new_tokens: DEFAULT_TARGET_TOKEN_CAP,
            temperature: 0.0,
            timeout_secs: backend.timeout.as_secs_f64(),
            max_retries_network: backend.max_retries_network,
            critic: CriticKind::Model,
            critic_endpoint_url: String::new(),
            critic_model_name: String::new(),
            judge_endpoint_url: String::new(),
            judge_model_name: String::new(),
            embedder: EmbedderKind::DeterministicLocal,
            embedding_dimension: HashedBowEmbedder::DEFAULT_DIMENSION,
            embedding_endpoint_url: String::new(),
            embedding_model: String::new(),
            relevance_gate: Gate::Diff,
            language: "python".to_string(),
            max_retries: DEFAULT_MAX_RETRIES,
            retrieval_k: DEFAULT_K,
            chunk_max_chars: DEFAULT_MAX_CHARS,
            source_token_cap: DEFAULT_SOURCE_TOKEN_CAP,
            target_token_cap: DEFAULT_TARGET_TOKEN_CAP,
            seed: 0,
            workers: 0,
        }
    }
}

/// Resolved configuration used by the commands.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub backend: BackendConfig,
    pub critic: CriticKind,
    pub critic_backend: Option<BackendConfig>,
    pub judge_backend: Option<BackendConfig>,
    pub embedder: EmbedderKind,
    pub embedding_dimension: usize,
    pub embedding_backend: Option<BackendConfig>,
    pub relevance_gate: Gate,
    pub language: String,
    pub max_retries: usize,
    pub retrieval_k: usize,
    pub chunk_max_chars: usize,
    pub source_token_cap: usize,
    pub target_token_cap: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        FileConfig::default().resolve().expect("defaults are valid")
    }
}

impl FileConfig {
    pub fn resolve(self) -> Result<PipelineConfig, ConfigError> {
        let timeout = Duration::try_from_secs_f64(self.timeout_secs)
            .map_err(|_| ConfigError::Invalid("timeout_secs must be a positive number".into()))?;
        let backend = BackendConfig {
            endpoint_url: self.endpoint_url,
            model_name: self.model_name,
            api_key_env: self.api_key_env,
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            timeout,
            max_retries_network: self.max_retries_network,
        };
        backend
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let derived = |url: String, model: String| -> Option<BackendConfig> {
            if url.is_empty() && model.is_empty() {
                return None;
            }
            let mut cfg = backend.clone();
            if !url.is_empty() {
                cfg.endpoint_url = url;
            }
            if !model.is_empty() {
                cfg.model_name = model;
            }
            Some(cfg)
        };
        let critic_backend = derived(self.critic_endpoint_url, self.critic_model_name);
        let judge_backend = derived(self.judge_endpoint_url, self.judge_model_name);
        let embedding_backend = derived(self.embedding_endpoint_url, self.embedding_model);

        let minimums = [
            ("max_new_tokens", self.max_new_tokens, 1),
            ("source_token_cap", self.source_token_cap, 1),
            ("target_token_cap", self.target_token_cap, 1),
            ("chunk_max_chars", self.chunk_max_chars, MIN_MAX_CHARS),
            ("embedding_dimension", self.embedding_dimension, 1),
        ];
        for (key, value, min) in minimums {
            if value < min {
                return Err(ConfigError::Invalid(format!(
                    "{key} must be at least {min}, got {value}"
                )));
            }
        }
        if self.language.trim().is_empty() {
            return Err(ConfigError::Invalid("language is empty".into()));
        }

        Ok(PipelineConfig {
            backend,
            critic: self.critic,
            critic_backend,
            judge_backend,
            embedder: self.embedder,
            embedding_dimension: self.embedding_dimension,
            embedding_backend,
            relevance_gate: self.relevance_gate,
            language: self.language,
            max_retries: self.max_retries,
            retrieval_k: self.retrieval_k,
            chunk_max_chars: self.chunk_max_chars,
            source_token_cap: self.source_token_cap,
            target_token_cap: self.target_token_cap,
            seed: self.seed,
            workers: self.workers,
        })
    }
}

/// Picks the config file: explicit path, then `$DOCSYNC_CONFIG`, then
/// `docsync.toml` in the working directory if it exists.
pub fn config_path(explicit: Option<&Path>) -> Option<PathBuf> {
    if let Some(p) = explicit {
        return Some(p.to_path_buf());
    }
    if let Some(p) = std::env::var_os(CONFIG_ENV).filter(|p| !p.is_empty()) {
        return Some(PathBuf::from(p));
    }
    let default = PathBuf::from(DEFAULT_CONFIG_FILE);
    default.exists().then_some(default)
}

/// Loads the file (if any), applies environment overrides, and validates.
pub fn load(explicit: Option<&Path>) -> Result<PipelineConfig, ConfigError> {
    let env: Vec<(String, String)> = std::env::vars()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    load_with_env(config_path(explicit).as_deref(), &env)
}

pub fn load_with_env(
    path: Option<&Path>,
    env: &[(String, String)],
) -> Result<PipelineConfig, ConfigError> {
    let mut table = match path {
        Some(p) => {
            let body = std::fs::read_to_string(p).map_err(|e| ConfigError::File {
                path: p.to_path_buf(),
                message: e.to_string(),
            })?;
            body.parse::<toml::Table>().map_err(|e| ConfigError::File {
                path: p.to_path_buf(),
                message: e.to_string(),
            })?
        }
        None => toml::Table::new(),
    };

    let known = toml::Table::try_from(FileConfig::default()).expect("defaults serialize");
    for (var, raw) in env {
        let Some(key) = var.strip_prefix(ENV_PREFIX).map(str::to_ascii_lowercase) else {
            continue;
        };
        let Some(default) = known.get(&key) else {
            continue;
        };
        table.insert(
            key,
            env_value(raw, default).map_err(|message| ConfigError::Env {
                var: var.clone(),
                message,
            })?,
        );
    }

    let file: FileConfig = table.try_into().map_err(|e: toml::de::Error| match path {
        Some(p) => ConfigError::File {
            path: p.to_path_buf(),
            message: e.to_string(),
        },
        None => ConfigError::Invalid(e.to_string()),
    })?;
    file.resolve()
}

/// Parses an environment string into the TOML type of the default value.
fn env_value(raw: &str, like: &toml::Value) -> Result<toml::Value, String> {
    let value = match like {
        toml::Value::String(_) => toml::Value::String(raw.to_string()),
        toml::Value::Integer(_) => {
            toml::Value::Integer(raw.trim().parse().map_err(|e| format!("{e}"))?)
        }
        toml::Value::Float(_) => {
            toml::Value::Float(raw.trim().parse().map_err(|e| format!("{e}"))?)
        }
        toml::Value::Boolean(_) => {
            toml::Value::Boolean(raw.trim().parse().map_err(|e| format!("{e}"))?)
        }
        other => return Err(format!("unsupported override for {other}")),
    };
    Ok(value)
}
