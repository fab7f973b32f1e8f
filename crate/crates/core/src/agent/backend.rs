use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::prompt::{parse_sections, QUESTION_LABEL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("completion backend timed out")]
    Timeout,
    #[error("completion backend transport error: {0}")]
    Transport(String),
    #[error("completion backend returned an unexpected body: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(with = "secs")]
    pub timeout: Duration,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: 1024, timeout: Duration::from_secs(60) }
    }
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

/// Text completion. Implementations must not keep per-call state.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, BackendError>;
}

/// Deterministic test backend that echoes the prompt's structure.
#[derive(Debug, Default, Clone, Copy)]
pub struct StubBackend;

impl CompletionBackend for StubBackend {
    fn complete(&self, prompt: &str, _params: &GenerationParams) -> Result<String, BackendError> {
        let sections = parse_sections(prompt);
        let question = sections.iter().find(|(l, _)| l == QUESTION_LABEL).map_or("", |(_, b)| b.as_str());
        let context: Vec<&(String, String)> = sections.iter().filter(|(l, _)| l != QUESTION_LABEL).collect();
        let mut out = format!("[stub] question: {question}\n");
        if context.is_empty() {
            out.push_str("[stub] no context\n");
        }
        for (label, body) in context {
            let first: String = body.lines().next().unwrap_or("").chars().take(80).collect();
            out.push_str(&format!("[stub] {label} ({} lines): {first}\n", body.lines().count()));
        }
        Ok(out)
    }
}

pub const ENV_URL: &str = "CADENZA_LLM_URL";
pub const ENV_KEY: &str = "CADENZA_LLM_KEY";
pub const ENV_MODEL: &str = "CADENZA_LLM_MODEL";
pub const DEFAULT_MODEL: &str = "gpt-4.1";

/// Client for an OpenAI-compatible chat-completions endpoint.
#[derive(Debug, Clone)]
pub struct OpenAiBackend {
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
}

impl OpenAiBackend {
    pub fn new(url: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Self {
        Self { url: url.into(), api_key, model: model.into() }
    }

    /// Reads the endpoint settings from the environment; `None` without a URL.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var(ENV_URL).ok().filter(|u| !u.is_empty())?;
        let key = std::env::var(ENV_KEY).ok().filter(|k| !k.is_empty());
        let model = std::env::var(ENV_MODEL).ok().filter(|m| !m.is_empty()).unwrap_or_else(|| DEFAULT_MODEL.into());
        Some(Self::new(url, key, model))
    }

    pub fn request_body(&self, prompt: &str, params: &GenerationParams) -> Value {
        json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        })
    }
}

/// Extracts `choices[0].message.content`.
pub fn parse_chat_response(body: &Value) -> Result<String, BackendError> {
    body.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::Protocol(body.to_string().chars().take(200).collect()))
}

impl CompletionBackend for OpenAiBackend {
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(params.timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let mut req = client.post(&self.url).json(&self.request_body(prompt, params));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let classify = |e: reqwest::Error| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        };
        let resp = req.send().map_err(classify)?;
        let status = resp.status();
        let body: Value = resp.json().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Protocol(format!("HTTP {status}: {e}"))
            }
        })?;
        if !status.is_success() {
            return Err(BackendError::Transport(format!("HTTP {status}: {body}")));
        }
        parse_chat_response(&body)
    }
}
