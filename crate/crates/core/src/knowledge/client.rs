use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::KnowledgeError;
use crate::http::{JsonPoster, RetryPolicy};

/// Anything that answers a single-turn prompt with text.
pub trait ChatClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, KnowledgeError>;

    fn model_name(&self) -> &str;

    /// Ask again after an unusable reply. Caching clients bypass the cache.
    fn retry(&self, prompt: &str) -> Result<String, KnowledgeError> {
        self.complete(prompt)
    }
}

impl<C: ChatClient + ?Sized> ChatClient for &C {
    fn complete(&self, prompt: &str) -> Result<String, KnowledgeError> {
        (**self).complete(prompt)
    }
    fn model_name(&self) -> &str {
        (**self).model_name()
    }
    fn retry(&self, prompt: &str) -> Result<String, KnowledgeError> {
        (**self).retry(prompt)
    }
}

impl<C: ChatClient + ?Sized> ChatClient for Box<C> {
    fn complete(&self, prompt: &str) -> Result<String, KnowledgeError> {
        (**self).complete(prompt)
    }
    fn model_name(&self) -> &str {
        (**self).model_name()
    }
    fn retry(&self, prompt: &str) -> Result<String, KnowledgeError> {
        (**self).retry(prompt)
    }
}

/// On-disk reply cache keyed by (model, temperature, prompt).
pub struct CachedClient<C> {
    inner: C,
    dir: PathBuf,
    temperature: f64,
}

impl<C: ChatClient> CachedClient<C> {
    pub fn new(inner: C, dir: impl Into<PathBuf>, temperature: f64) -> Result<Self, KnowledgeError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir, temperature })
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }

    fn entry(&self, prompt: &str) -> PathBuf {
        let key = serde_json::to_vec(&(self.inner.model_name(), self.temperature, prompt)).expect("key serializes");
        let hex: String = Sha256::digest(&key).iter().map(|b| format!("{b:02x}")).collect();
        self.dir.join(format!("{hex}.txt"))
    }

    fn store(&self, prompt: &str, reply: &str) -> Result<(), KnowledgeError> {
        let path = self.entry(prompt);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, reply)?;
        fs::rename(tmp, path)?;
        Ok(())
    }
}

impl<C: ChatClient> ChatClient for CachedClient<C> {
    fn complete(&self, prompt: &str) -> Result<String, KnowledgeError> {
        let path = self.entry(prompt);
        if let Ok(hit) = fs::read_to_string(&path) {
            return Ok(hit);
        }
        let reply = self.inner.complete(prompt)?;
        self.store(prompt, &reply)?;
        Ok(reply)
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn retry(&self, prompt: &str) -> Result<String, KnowledgeError> {
        let reply = self.inner.retry(prompt)?;
        self.store(prompt, &reply)?;
        Ok(reply)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmClientConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    /// Re-asks after an unparseable reply.
    pub max_retries: u32,
    pub cache_dir: Option<PathBuf>,
    pub timeout_secs: u64,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: Option<String>,
    pub auth_header: String,
    pub max_in_flight: usize,
    pub http_retry: RetryPolicy,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "Llama-3.1-70B-Instruct".into(),
            temperature: 0.0,
            max_retries: 2,
            cache_dir: None,
            timeout_secs: 120,
            auth_env: None,
            auth_header: "Authorization".into(),
            max_in_flight: 4,
            http_retry: RetryPolicy::default(),
        }
    }
}

/// Chat-completion endpoint client.
pub struct LlmClient {
    cfg: LlmClientConfig,
    poster: JsonPoster,
}

impl LlmClient {
    pub fn new(cfg: LlmClientConfig) -> Result<Self, KnowledgeError> {
        let mut headers = Vec::new();
        if let Some(var) = &cfg.auth_env {
            let token = std::env::var(var)
                .map_err(|_| KnowledgeError::Client(format!("environment variable {var} is not set")))?;
            headers.push((cfg.auth_header.clone(), format!("Bearer {token}")));
        }
        let poster = JsonPoster::new(Duration::from_secs(cfg.timeout_secs), cfg.http_retry.clone(), headers)
            .map_err(|e| KnowledgeError::Client(e.to_string()))?;
        Ok(Self { cfg, poster })
    }

    pub fn config(&self) -> &LlmClientConfig {
        &self.cfg
    }
}

fn first_choice_text(v: &Value) -> Option<String> {
    let choice = v.get("choices")?.get(0)?;
    choice
        .get("message")
        .and_then(|m| m.get("content"))
        .or_else(|| choice.get("text"))
        .and_then(Value::as_str)
        .map(str::to_string)
}

impl ChatClient for LlmClient {
    fn complete(&self, prompt: &str) -> Result<String, KnowledgeError> {
        let body = json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
        });
        let reply = self
            .poster
            .post(&self.cfg.endpoint, &body)
            .map_err(|e| KnowledgeError::Client(e.to_string()))?;
        first_choice_text(&reply)
            .ok_or_else(|| KnowledgeError::Client(format!("response has no choices[0] text: {reply}")))
    }

    fn model_name(&self) -> &str {
        &self.cfg.model
    }
}
