use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::TextEmbedding;
use crate::error::{Error, Result};
use crate::http::{JsonPoster, RetryPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExternalEmbedderConfig {
    pub url: String,
    pub auth_header: Option<String>,
    pub auth_value: Option<String>,
    /// Environment variable holding the auth value; used when `auth_value`
    /// is unset.
    pub auth_value_env: Option<String>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub batch_size: usize,
    /// Seed of a fixed Gaussian matrix mapping the service's width to the
    /// shared width. Without it a width mismatch is an error.
    pub projection_seed: Option<u64>,
    pub retry: RetryPolicy,
}

impl Default for ExternalEmbedderConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8080/embed".into(),
            auth_header: None,
            auth_value: None,
            auth_value_env: None,
            timeout_secs: 60,
            max_in_flight: 4,
            batch_size: 32,
            projection_seed: None,
            retry: RetryPolicy::default(),
        }
    }
}

impl ExternalEmbedderConfig {
    fn headers(&self) -> Result<Vec<(String, String)>> {
        let Some(name) = &self.auth_header else {
            return Ok(Vec::new());
        };
        let value = match (&self.auth_value, &self.auth_value_env) {
            (Some(v), _) => v.clone(),
            (None, Some(var)) => std::env::var(var)
                .map_err(|_| Error::Config(format!("environment variable {var} is not set")))?,
            (None, None) => return Err(Error::Config(format!("auth header {name} has no value"))),
        };
        Ok(vec![(name.clone(), value)])
    }
}

fn parse_embeddings(reply: &Value, expected: usize) -> Result<Vec<Vec<f64>>> {
    let rows = reply
        .get("embeddings")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Invalid("embedding reply has no \"embeddings\" array".into()))?;
    if rows.len() != expected {
        return Err(Error::Invalid(format!("asked for {expected} embeddings, got {}", rows.len())));
    }
    rows.iter()
        .map(|r| {
            r.as_array()
                .and_then(|xs| xs.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                .ok_or_else(|| Error::Invalid("embedding rows must be arrays of numbers".into()))
        })
        .collect()
}

fn projection(seed: u64, from: usize, to: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (from as f64).sqrt()).expect("positive std");
    (0..from * to).map(|_| normal.sample(&mut rng)).collect()
}

fn finish(text: &str, raw: Vec<f64>, shared_dim: usize, proj: Option<&(usize, Vec<f64>)>) -> Result<TextEmbedding> {
    let v = if raw.len() == shared_dim {
        raw
    } else {
        match proj {
            Some((from, m)) if *from == raw.len() => (0..shared_dim)
                .map(|j| raw.iter().enumerate().map(|(i, x)| x * m[i * shared_dim + j]).sum())
                .collect(),
            _ => {
                return Err(Error::Invalid(format!(
                    "external embedding has width {}, expected {shared_dim} and no projection is configured",
                    raw.len()
                )))
            }
        }
    };
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Invalid(format!("external embedding of {text:?} has zero norm")));
    }
    Ok(TextEmbedding::new(text, v.into_iter().map(|x| x / norm).collect()))
}

/// Embed `texts` through the configured service: batched, at most
/// `max_in_flight` requests at once, normalized client-side.
pub fn embed_batch_external(texts: &[String], cfg: &ExternalEmbedderConfig, shared_dim: usize) -> Result<Vec<TextEmbedding>> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let poster = JsonPoster::new(Duration::from_secs(cfg.timeout_secs), cfg.retry.clone(), cfg.headers()?)?;
    let chunks: Vec<&[String]> = texts.chunks(cfg.batch_size.max(1)).collect();
    let next = AtomicUsize::new(0);
    let workers = cfg.max_in_flight.clamp(1, chunks.len());
    let mut raw: Vec<(usize, Result<Vec<Vec<f64>>>)> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= chunks.len() {
                            break;
                        }
                        let reply = poster
                            .post(&cfg.url, &json!({ "texts": chunks[i] }))
                            .map_err(Error::from)
                            .and_then(|r| parse_embeddings(&r, chunks[i].len()));
                        local.push((i, reply));
                    }
                    local
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("embedding worker panicked")).collect()
    });
    raw.sort_by_key(|(i, _)| *i);

    let mut proj: Option<(usize, Vec<f64>)> = None;
    let mut out = Vec::with_capacity(texts.len());
    let mut idx = 0;
    for (_, rows) in raw {
        for v in rows? {
            if v.len() != shared_dim && proj.is_none() {
                if let Some(seed) = cfg.projection_seed {
                    proj = Some((v.len(), projection(seed, v.len(), shared_dim)));
                }
            }
            out.push(finish(&texts[idx], v, shared_dim, proj.as_ref())?);
            idx += 1;
        }
    }
    Ok(out)
}
