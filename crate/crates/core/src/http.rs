//! Blocking JSON-over-HTTP with bounded exponential backoff, shared by the
//! chat-completion and embedding clients.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("request to {url} failed after {attempts} attempt(s): {last}")]
    Exhausted { url: String, attempts: u32, last: String },
    #[error("request to {url} rejected with status {status}: {body}")]
    Rejected { url: String, status: u16, body: String },
    #[error("could not build HTTP client: {0}")]
    Build(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    /// Delay before the first retry; doubles each time.
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 200,
            max_delay_ms: 5_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1u64 << retry.min(20));
        Duration::from_millis(ms.min(self.max_delay_ms))
    }
}

/// Thin wrapper over a blocking `reqwest` client.
#[derive(Debug, Clone)]
pub struct JsonPoster {
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    headers: Vec<(String, String)>,
}

impl JsonPoster {
    pub fn new(timeout: Duration, retry: RetryPolicy, headers: Vec<(String, String)>) -> Result<Self, HttpError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| HttpError::Build(e.to_string()))?;
        Ok(Self { client, retry, headers })
    }

    /// POST `body`, retrying transport errors, 429 and 5xx. Other 4xx fail
    /// immediately.
    pub fn post(&self, url: &str, body: &Value) -> Result<Value, HttpError> {
        let mut last = String::new();
        for attempt in 0..=self.retry.max_retries {
            if attempt > 0 {
                thread::sleep(self.retry.delay(attempt - 1));
            }
            let mut req = self.client.post(url).json(body);
            for (k, v) in &self.headers {
                req = req.header(k.as_str(), v.as_str());
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        match resp.json::<Value>() {
                            Ok(v) => return Ok(v),
                            Err(e) => last = format!("invalid JSON body: {e}"),
                        }
                    } else if status.as_u16() == 429 || status.is_server_error() {
                        last = format!("status {status}");
                    } else {
                        return Err(HttpError::Rejected {
                            url: url.to_string(),
                            status: status.as_u16(),
                            body: resp.text().unwrap_or_default(),
                        });
                    }
                }
                Err(e) => last = e.to_string(),
            }
            log::warn!("POST {url} attempt {} failed: {last}", attempt + 1);
        }
        Err(HttpError::Exhausted {
            url: url.to_string(),
            attempts: self.retry.max_retries + 1,
            last,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy { max_retries: 5, base_delay_ms: 100, max_delay_ms: 350 };
        assert_eq!(p.delay(0), Duration::from_millis(100));
        assert_eq!(p.delay(1), Duration::from_millis(200));
        assert_eq!(p.delay(2), Duration::from_millis(350));
    }
}
