//! OpenAI-compatible HTTP backend.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::warn;

use super::{Backend, CompletionResponse, Embedding, Prompt, Usage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    /// Base URL, e.g. `https://api.openai.com/v1`.
    pub endpoint: String,
    pub model: String,
    pub embedding_model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_attempts")]
    pub attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub initial_backoff_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub temperature: f64,
}

fn default_api_key_env() -> String {
    "OPENAI_API_KEY".into()
}
fn default_attempts() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    1000
}
fn default_timeout_secs() -> u64 {
    60
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    requests: AtomicU64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self> {
        if config.attempts == 0 {
            return Err(Error::Config("http backend needs at least one attempt".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        let api_key = std::env::var(&config.api_key_env).ok();
        Ok(Self {
            config,
            agent,
            api_key,
            requests: AtomicU64::new(0),
        })
    }

    /// Number of HTTP requests issued so far, retries included.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.endpoint.trim_end_matches('/'), path)
    }

    fn post<T: for<'de> Deserialize<'de>>(&self, path: &str, body: &serde_json::Value) -> Result<T> {
        let url = self.url(path);
        let mut backoff = Duration::from_millis(self.config.initial_backoff_ms);
        let mut last_error = String::new();
        for attempt in 1..=self.config.attempts {
            self.requests.fetch_add(1, Ordering::Relaxed);
            let mut request = self.agent.post(&url);
            if let Some(key) = &self.api_key {
                request = request.header("Authorization", &format!("Bearer {key}"));
            }
            match request.send_json(body) {
                Ok(mut response) => {
                    return response.body_mut().read_json::<T>().map_err(|e| {
                        Error::MalformedResponse(format!("{url}: undecodable body: {e}"))
                    })
                }
                Err(ureq::Error::StatusCode(code)) if !(code == 429 || code >= 500) => {
                    return Err(Error::BackendUnavailable(format!("{url}: HTTP {code}")));
                }
                Err(e) => {
                    last_error = e.to_string();
                    warn!(attempt, error = %last_error, "backend request failed");
                }
            }
            if attempt < self.config.attempts {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
        }
        Err(Error::BackendUnavailable(format!(
            "{url}: {} attempts failed, last error: {last_error}",
            self.config.attempts
        )))
    }
}

impl Backend for HttpBackend {
    fn complete(&self, prompt: Prompt<'_>) -> Result<CompletionResponse> {
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt.text}],
            "temperature": self.config.temperature,
            "seed": prompt.request.seed,
        });
        let response: ChatResponse = self.post("chat/completions", &body)?;
        let text = response
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        if text.trim().is_empty() {
            return Err(Error::MalformedResponse("empty generation".into()));
        }
        let usage = response
            .usage
            .map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok(CompletionResponse { text, usage })
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        let body = json!({"model": self.config.embedding_model, "input": text});
        let response: EmbeddingResponse = self.post("embeddings", &body)?;
        let values = response
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| Error::MalformedResponse("no embedding in response".into()))?;
        Embedding::new(values)
    }

    fn identity(&self) -> String {
        format!("live:{}#{}", self.config.endpoint, self.config.model)
    }
}
