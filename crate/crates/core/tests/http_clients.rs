//! LLM and embedding clients against a scripted local HTTP server.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};

use kmerl::http::RetryPolicy;
use kmerl::knowledge::{mine_reports, CachedClient, ChatClient, LlmClient, LlmClientConfig, MiningOptions, RuleBasedClient, RuleTables};
use kmerl::text::{embed_batch_external, ExternalEmbedderConfig, TextEmbedding};

#[derive(Debug, Clone)]
struct Request {
    headers: BTreeMap<String, String>,
    body: Value,
}

type Handler = dyn Fn(&Request, usize) -> (u16, String) + Send + Sync;

struct Mock {
    url: String,
    requests: Arc<Mutex<Vec<Request>>>,
}

impl Mock {
    fn count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

/// Serve one request per connection; `handler` sees the request and its
/// arrival number.
fn serve(handler: impl Fn(&Request, usize) -> (u16, String) + Send + Sync + 'static) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&requests);
    let handler: Arc<Handler> = Arc::new(handler);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let log = Arc::clone(&log);
            let handler = Arc::clone(&handler);
            thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut headers = BTreeMap::new();
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                loop {
                    line.clear();
                    reader.read_line(&mut line).unwrap();
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = l.split_once(':') {
                        headers.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
                    }
                }
                let len: usize = headers.get("content-length").and_then(|v| v.parse().ok()).unwrap_or(0);
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let req = Request { headers, body: serde_json::from_slice(&body).unwrap_or(Value::Null) };
                let n = {
                    let mut log = log.lock().unwrap();
                    log.push(req.clone());
                    log.len()
                };
                let (status, text) = handler(&req, n);
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                    text.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            });
        }
    });
    Mock { url, requests }
}

fn chat_reply(content: &str) -> String {
    json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] }).to_string()
}

fn fast_retry(max_retries: u32) -> RetryPolicy {
    RetryPolicy { max_retries, base_delay_ms: 1, max_delay_ms: 5 }
}

fn llm(url: &str) -> LlmClientConfig {
    LlmClientConfig { endpoint: url.to_string(), model: "test-model".into(), http_retry: fast_retry(3), ..LlmClientConfig::default() }
}

fn prompt_of(req: &Request) -> String {
    req.body["messages"][0]["content"].as_str().unwrap_or_default().to_string()
}

#[test]
fn llm_client_retries_server_errors_and_sends_auth() {
    let mock = serve(|req, n| if n < 3 { (503, "{}".into()) } else { (200, chat_reply(&format!("echo {}", prompt_of(req)))) });
    std::env::set_var("KMERL_TEST_TOKEN_A", "s3cret");
    let client = LlmClient::new(LlmClientConfig { auth_env: Some("KMERL_TEST_TOKEN_A".into()), ..llm(&mock.url) }).unwrap();
    assert_eq!(client.complete("hello").unwrap(), "echo hello");
    assert_eq!(mock.count(), 3);
    let reqs = mock.requests.lock().unwrap();
    assert_eq!(reqs[2].headers["authorization"], "Bearer s3cret");
    assert_eq!(reqs[2].body["model"], "test-model");
    assert_eq!(reqs[2].body["temperature"], 0.0);
}

#[test]
fn llm_client_gives_up_on_client_errors_and_exhaustion() {
    let rejected = serve(|_, _| (400, r#"{"error":"bad"}"#.into()));
    let err = LlmClient::new(llm(&rejected.url)).unwrap().complete("x").unwrap_err();
    assert!(err.to_string().contains("400"), "{err}");
    assert_eq!(rejected.count(), 1);

    let down = serve(|_, _| (500, "{}".into()));
    assert!(LlmClient::new(llm(&down.url)).unwrap().complete("x").is_err());
    assert_eq!(down.count(), 4, "one try plus three retries");
}

#[test]
fn missing_auth_variable_is_a_construction_error() {
    let cfg = LlmClientConfig { auth_env: Some("KMERL_TEST_TOKEN_UNSET".into()), ..LlmClientConfig::default() };
    assert!(LlmClient::new(cfg).is_err());
}

#[test]
fn cached_client_asks_the_server_once() {
    let mock = serve(|_, n| (200, chat_reply(&format!("reply {n}"))));
    let dir = tempfile::tempdir().unwrap();
    let client = CachedClient::new(LlmClient::new(llm(&mock.url)).unwrap(), dir.path(), 0.0).unwrap();
    assert_eq!(client.complete("same prompt").unwrap(), "reply 1");
    assert_eq!(client.complete("same prompt").unwrap(), "reply 1");
    assert_eq!(mock.count(), 1);
    // a fresh client over the same directory still hits the cache
    let again = CachedClient::new(LlmClient::new(llm(&mock.url)).unwrap(), dir.path(), 0.0).unwrap();
    assert_eq!(again.complete("same prompt").unwrap(), "reply 1");
    assert_eq!(mock.count(), 1);
}

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/knowledge")
}

#[test]
fn mining_over_http_matches_the_in_process_client() {
    let tables = RuleTables::load(&fixture_dir().join("rules.json")).unwrap();
    let reports: Vec<String> =
        serde_json::from_str(&std::fs::read_to_string(fixture_dir().join("reports.json")).unwrap()).unwrap();
    let backend = RuleBasedClient::new(tables.clone());
    let mock = serve(move |req, _| (200, chat_reply(&backend.complete(&prompt_of(req)).unwrap())));
    let remote = LlmClient::new(llm(&mock.url)).unwrap();
    let opts = MiningOptions { concurrency: 4, ..MiningOptions::default() };
    let over_http = mine_reports(&reports, &remote, &opts).unwrap();
    let local = mine_reports(&reports, &RuleBasedClient::new(tables), &MiningOptions::default()).unwrap();
    assert_eq!(over_http.extracted, local.extracted);
    assert_eq!(over_http.vocabulary, local.vocabulary);
    assert_eq!(over_http.labels, local.labels);
}

#[test]
fn unparseable_replies_are_retried_then_fail() {
    let mock = serve(|_, n| (200, chat_reply(if n == 1 { "I think it is sinus rhythm" } else { "[sinus rhythm]" })));
    let client = LlmClient::new(llm(&mock.url)).unwrap();
    let opts = MiningOptions { concurrency: 1, parse_retries: 1 };
    // extraction parses on the second try; verification replies are then not YES/NO
    let err = kmerl::knowledge::extract_entities("Sinus rhythm.", &client, &opts).unwrap_err();
    assert!(err.to_string().contains("unparseable"), "{err}");
    assert_eq!(mock.count(), 4);
}

fn embedder(url: &str) -> ExternalEmbedderConfig {
    ExternalEmbedderConfig { url: url.to_string(), batch_size: 2, max_in_flight: 3, retry: fast_retry(2), ..ExternalEmbedderConfig::default() }
}

/// A deterministic 3-wide vector per text.
fn fake_embedding(t: &str) -> Value {
    json!([t.len() as f64, 1.0, t.chars().filter(|c| *c == 'a').count() as f64])
}

#[test]
fn external_embeddings_are_batched_ordered_and_normalized() {
    let mock = serve(|req, _| {
        let rows: Vec<Value> = req.body["texts"].as_array().unwrap().iter().map(|t| fake_embedding(t.as_str().unwrap())).collect();
        (200, json!({ "embeddings": rows }).to_string())
    });
    let texts: Vec<String> = ["atrial fibrillation", "lvh", "sinus rhythm", "a", "anterior mi"].map(String::from).to_vec();
    let out = embed_batch_external(&texts, &embedder(&mock.url), 3).unwrap();
    assert_eq!(mock.count(), 3);
    for (t, e) in texts.iter().zip(&out) {
        let raw: Vec<f64> = fake_embedding(t).as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let expected: Vec<f64> = raw.iter().map(|x| x / norm).collect();
        assert_eq!(e.text_hash, TextEmbedding::new(t, vec![1.0]).text_hash);
        for (a, b) in e.vector.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn external_width_mismatch_needs_a_projection() {
    let mock = serve(|req, _| {
        let n = req.body["texts"].as_array().unwrap().len();
        (200, json!({ "embeddings": vec![json!([1.0, 2.0, 3.0, 4.0, 5.0]); n] }).to_string())
    });
    let texts = vec!["lvh".to_string()];
    assert!(embed_batch_external(&texts, &embedder(&mock.url), 3).is_err());
    let cfg = ExternalEmbedderConfig { projection_seed: Some(1), ..embedder(&mock.url) };
    let out = embed_batch_external(&texts, &cfg, 3).unwrap();
    assert_eq!(out[0].vector.len(), 3);
    assert!((out[0].vector.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn short_embedding_replies_are_errors() {
    let mock = serve(|_, _| (200, json!({ "embeddings": [[1.0, 0.0, 0.0]] }).to_string()));
    let texts = vec!["a".to_string(), "b".to_string()];
    assert!(embed_batch_external(&texts, &embedder(&mock.url), 3).is_err());
}
