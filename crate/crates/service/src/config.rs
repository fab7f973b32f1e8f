use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cadenza_core::agent::{ENV_KEY, ENV_MODEL, ENV_URL};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("invalid config {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("invalid value for {var}: {value:?}")]
    Env { var: String, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Stub,
    Openai,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub backend: BackendKind,
    pub url: Option<String>,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout_secs: f64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Stub,
            url: None,
            api_key: None,
            model: cadenza_core::agent::DEFAULT_MODEL.to_string(),
            timeout_secs: 60.0,
        }
    }
}

/// Settings shared by the service and the CLI (`cadenza.toml`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub host: String,
    pub port: u16,
    pub library_path: Option<PathBuf>,
    pub sessions_path: PathBuf,
    pub max_body_bytes: usize,
    pub request_timeout_secs: u64,
    /// Allowed browser origins; `"*"` allows any.
    pub cors_origins: Vec<String>,
    pub default_tempo_bpm: f64,
    pub llm: LlmConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            library_path: None,
            sessions_path: PathBuf::from("sessions"),
            max_body_bytes: 50 * 1024 * 1024,
            request_timeout_secs: 120,
            cors_origins: vec!["*".into()],
            default_tempo_bpm: 120.0,
            llm: LlmConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str, origin: &str) -> Result<Config, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.into(), reason: e.to_string() })
    }

    /// Defaults, then the file (if any), then environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Config, ConfigError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError::Read { path: p.display().to_string(), reason: e.to_string() })?;
                Config::from_toml(&text, &p.display().to_string())?
            }
            None => Config::default(),
        };
        config.apply_env(|k| std::env::var(k).ok())?;
        Ok(config)
    }

    /// Applies `CADENZA_*` overrides read through `get`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let bad = |var: &str, value: &str| ConfigError::Env { var: var.into(), value: value.into() };
        if let Some(v) = get("CADENZA_HOST") {
            self.host = v;
        }
        if let Some(v) = get("CADENZA_PORT") {
            self.port = v.parse().map_err(|_| bad("CADENZA_PORT", &v))?;
        }
        if let Some(v) = get("CADENZA_LIBRARY_PATH") {
            self.library_path = Some(PathBuf::from(v));
        }
        if let Some(v) = get("CADENZA_SESSIONS_PATH") {
            self.sessions_path = PathBuf::from(v);
        }
        if let Some(v) = get(ENV_URL).filter(|v| !v.is_empty()) {
            self.llm.url = Some(v);
            self.llm.backend = BackendKind::Openai;
        }
        if let Some(v) = get(ENV_KEY).filter(|v| !v.is_empty()) {
            self.llm.api_key = Some(v);
        }
        if let Some(v) = get(ENV_MODEL).filter(|v| !v.is_empty()) {
            self.llm.model = v;
        }
        if let Some(v) = get("CADENZA_LLM_BACKEND") {
            self.llm.backend = match v.as_str() {
                "stub" => BackendKind::Stub,
                "openai" => BackendKind::Openai,
                _ => return Err(bad("CADENZA_LLM_BACKEND", &v)),
            };
        }
        Ok(())
    }
}
