//! Blocking HTTP chat backend. Speaks the common chat-completions shape:
//! POST {model, messages, temperature, max_tokens, seed}, read
//! choices[0].message.content.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{LlmBackend, LlmError, Sampling};

pub const ENV_URL: &str = "DISCIPLE_LLM_URL";
pub const ENV_MODEL: &str = "DISCIPLE_LLM_MODEL";
pub const ENV_KEY: &str = "DISCIPLE_LLM_KEY";
pub const ENV_TIMEOUT_S: &str = "DISCIPLE_LLM_TIMEOUT_S";

const DEFAULT_TIMEOUT_S: u64 = 60;

#[derive(Debug)]
pub struct HttpBackend {
    url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

impl HttpBackend {
    pub fn new(
        url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(HttpBackend {
            url: url.into(),
            model: model.into(),
            api_key,
            client,
        })
    }

    /// Backend settings come from DISCIPLE_LLM_URL / _MODEL / _KEY /
    /// _TIMEOUT_S; env always wins over config-file values.
    pub fn from_env_with(
        url: Option<String>,
        model: Option<String>,
        api_key: Option<String>,
        timeout_s: Option<u64>,
    ) -> Result<Self, LlmError> {
        let url = std::env::var(ENV_URL).ok().or(url).ok_or_else(|| {
            LlmError::Config(format!("{ENV_URL} not set and no url configured"))
        })?;
        let model = std::env::var(ENV_MODEL)
            .ok()
            .or(model)
            .unwrap_or_else(|| "default".to_string());
        let api_key = std::env::var(ENV_KEY).ok().or(api_key);
        let timeout_s = std::env::var(ENV_TIMEOUT_S)
            .ok()
            .and_then(|v| v.parse().ok())
            .or(timeout_s)
            .unwrap_or(DEFAULT_TIMEOUT_S);
        Self::new(url, model, api_key, Duration::from_secs(timeout_s))
    }
}

impl LlmBackend for HttpBackend {
    fn complete(&self, prompt: &str, sampling: &Sampling) -> Result<String, LlmError> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": sampling.temperature,
            "max_tokens": sampling.max_tokens,
            "seed": sampling.seed,
        });
        let mut request = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(LlmError::Transport(format!(
                "HTTP {status}: {}",
                text.chars().take(300).collect::<String>()
            )));
        }
        let parsed: ChatResponse = response
            .json()
            .map_err(|e| LlmError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| LlmError::Malformed("empty choices array".to_string()))
    }

    fn name(&self) -> &str {
        "http"
    }
}
