//! HTTP implementations of the backend contracts.
//!
//! Wire protocol (JSON over POST):
//!
//! | path              | request                                                        | response                          |
//! |-------------------|----------------------------------------------------------------|-----------------------------------|
//! | `/v1/extract`     | `{prompt}`                                                     | `{keywords: [string]}`            |
//! | `/v1/generate`    | `{prompt, negative_prompt, batch_size, seed, width, height, steps}` | `{images: [base64 PNG]}`     |
//! | `/v1/embed/text`  | `{texts: [string]}`                                            | `{embeddings: [[number]], dim}`   |
//! | `/v1/embed/image` | `{images: [base64 PNG]}`                                       | `{embeddings: [[number]], dim}`   |
//!
//! Requests carry `Authorization: Bearer <key>` when a key is configured.
//! Retryable failures are retried with exponential backoff, and every
//! exchange is appended to an [`HttpLog`] with the key scrubbed.

use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backends::{BackendError, BackendErrorKind};

pub mod chat;
pub mod embed;
pub mod txt2img;

pub use chat::{ChatExtractor, ChatRefiner};
pub use embed::HttpScorer;
pub use txt2img::{GeneratorSettings, HttpGenerator};

/// Environment variable that overrides any configured API key.
pub const API_KEY_ENV: &str = "PROMPTLOOP_API_KEY";

const REDACTED: &str = "[REDACTED]";
const LOG_BODY_LIMIT: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
}

fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_retries() -> u32 {
    2
}
fn default_backoff_base_ms() -> u64 {
    500
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_base_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let url = url::Url::parse(&self.base_url).map_err(|e| {
            BackendError::invalid_request(format!("base_url {:?}: {e}", self.base_url))
        })?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(BackendError::invalid_request(format!(
                "base_url {:?} must be http or https",
                self.base_url
            )));
        }
        if self.timeout_ms == 0 || self.backoff_base_ms == 0 {
            return Err(BackendError::invalid_request(
                "timeout_ms and backoff_base_ms must be positive",
            ));
        }
        Ok(())
    }

    /// Replaces the key with `PROMPTLOOP_API_KEY` when that variable is set.
    pub fn with_env_key(mut self) -> Self {
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            if !key.is_empty() {
                self.api_key = Some(key);
            }
        }
        self
    }

    pub fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path.trim_start_matches('/'))
    }

    /// Delay before retry number `attempt` (0-based): `backoff_base_ms * 2^attempt`.
    pub fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1u64 << attempt.min(32)))
    }
}

/// One request/response pair as recorded in the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub url: String,
    pub attempt: u32,
    pub authorized: bool,
    pub request: String,
    pub status: Option<u16>,
    pub response: String,
    pub error: Option<String>,
    /// Delay slept before the next attempt, when one followed.
    pub backoff_ms: Option<u64>,
}

/// Shared, append-only log of HTTP exchanges.
#[derive(Debug, Clone, Default)]
pub struct HttpLog(Arc<Mutex<Vec<Exchange>>>);

impl HttpLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> Vec<Exchange> {
        self.0.lock().unwrap().clone()
    }

    fn set_backoff(&self, index: usize, ms: u64) {
        if let Some(e) = self.0.lock().unwrap().get_mut(index) {
            e.backoff_ms = Some(ms);
        }
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::new();
        for e in self.entries() {
            out.push_str(&serde_json::to_string(&e).expect("exchange serializes"));
            out.push('\n');
        }
        fs::write(path, out)
    }
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Blocking JSON client with retry, auth and logging.
#[derive(Clone)]
pub struct HttpClient {
    cfg: EndpointConfig,
    inner: reqwest::blocking::Client,
    log: HttpLog,
    sleeper: Sleeper,
}

impl std::fmt::Debug for HttpClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpClient")
            .field("base_url", &self.cfg.base_url)
            .finish_non_exhaustive()
    }
}

impl HttpClient {
    pub fn new(cfg: EndpointConfig, log: HttpLog) -> Result<Self, BackendError> {
        cfg.validate()?;
        let inner = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| BackendError::new(BackendErrorKind::Protocol, e.to_string()))?;
        Ok(Self {
            cfg,
            inner,
            log,
            sleeper: Arc::new(std::thread::sleep),
        })
    }

    /// Replaces the function used to wait between retries.
    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    pub fn log(&self) -> &HttpLog {
        &self.log
    }

    fn redact(&self, text: &str) -> String {
        let mut s = match self.cfg.api_key.as_deref() {
            Some(key) if !key.is_empty() => text.replace(key, REDACTED),
            _ => text.to_string(),
        };
        if s.len() > LOG_BODY_LIMIT {
            let mut cut = LOG_BODY_LIMIT;
            while !s.is_char_boundary(cut) {
                cut -= 1;
            }
            let total = s.len();
            s.truncate(cut);
            s.push_str(&format!("...[{total} bytes]"));
        }
        s
    }

    fn attempt(&self, url: &str, body: &str) -> (Option<u16>, String, Result<Value, BackendError>) {
        let mut req = self
            .inner
            .post(url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_string());
        if let Some(key) = self.cfg.api_key.as_deref() {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return (None, String::new(), Err(classify_transport(&e))),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return (Some(status.as_u16()), String::new(), Err(classify_transport(&e))),
        };
        if !status.is_success() {
            let err = classify_status(status.as_u16(), &text);
            return (Some(status.as_u16()), text, Err(err));
        }
        let parsed = serde_json::from_str::<Value>(&text).map_err(|e| {
            BackendError::new(BackendErrorKind::Protocol, format!("response is not JSON: {e}"))
        });
        (Some(status.as_u16()), text, parsed)
    }

    /// POSTs `body` to `path`, retrying retryable failures.
    pub fn post_json(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = self.cfg.endpoint(path);
        let body = serde_json::to_string(body).expect("request serializes");
        let mut attempt = 0;
        loop {
            let (status, text, result) = self.attempt(&url, &body);
            let index = {
                let mut entries = self.log.0.lock().unwrap();
                entries.push(Exchange {
                    url: url.clone(),
                    attempt,
                    authorized: self.cfg.api_key.is_some(),
                    request: self.redact(&body),
                    status,
                    response: self.redact(&text),
                    error: result.as_ref().err().map(|e| self.redact(&e.to_string())),
                    backoff_ms: None,
                });
                entries.len() - 1
            };
            match result {
                Err(e) if e.retryable && attempt < self.cfg.max_retries => {
                    let delay = self.cfg.backoff(attempt);
                    self.log.set_backoff(index, delay.as_millis() as u64);
                    (self.sleeper)(delay);
                    attempt += 1;
                }
                Err(mut e) => {
                    e.detail = self.redact(&e.detail);
                    return Err(e);
                }
                Ok(v) => return Ok(v),
            }
        }
    }
}

fn classify_transport(e: &reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::new(BackendErrorKind::Timeout, e.to_string())
    } else if e.is_connect() {
        BackendError::new(BackendErrorKind::Protocol, format!("connection failed: {e}"))
            .with_retryable(true)
    } else {
        BackendError::new(BackendErrorKind::Protocol, e.to_string())
    }
}

fn classify_status(status: u16, body: &str) -> BackendError {
    let detail = format!("HTTP {status}: {}", body.chars().take(200).collect::<String>());
    match status {
        408 | 429 => BackendError::new(BackendErrorKind::Timeout, detail),
        500..=599 => BackendError::new(BackendErrorKind::ModelFailure, detail),
        _ => BackendError::new(BackendErrorKind::Protocol, detail),
    }
}

/// Deserializes a JSON response body, mapping schema errors to `InvalidResponse`.
pub(crate) fn from_value<T: for<'de> Deserialize<'de>>(v: Value) -> Result<T, BackendError> {
    serde_json::from_value(v)
        .map_err(|e| BackendError::invalid_response(format!("unexpected response shape: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_config_defaults_and_validation() {
        let cfg = EndpointConfig::new("http://localhost:8000/");
        assert_eq!(cfg.timeout_ms, 60_000);
        assert_eq!(cfg.max_retries, 2);
        assert_eq!(cfg.backoff_base_ms, 500);
        assert_eq!(cfg.endpoint("/v1/extract"), "http://localhost:8000/v1/extract");
        cfg.validate().unwrap();
        assert!(EndpointConfig::new("localhost:8000").validate().is_err());
        assert!(EndpointConfig::new("ftp://host").validate().is_err());
        assert!(EndpointConfig::new("not a url").validate().is_err());
    }

    #[test]
    fn backoff_doubles() {
        let cfg = EndpointConfig { backoff_base_ms: 500, ..EndpointConfig::new("http://x") };
        let ms: Vec<u128> = (0..3).map(|a| cfg.backoff(a).as_millis()).collect();
        assert_eq!(ms, vec![500, 1000, 2000]);
    }

    #[test]
    fn status_mapping() {
        let e = classify_status(500, "boom");
        assert_eq!(e.kind, BackendErrorKind::ModelFailure);
        assert!(e.retryable);
        let e = classify_status(400, "bad");
        assert_eq!(e.kind, BackendErrorKind::Protocol);
        assert!(!e.retryable);
        assert!(classify_status(429, "").retryable);
    }

    #[test]
    fn api_key_is_never_serialized() {
        let cfg = EndpointConfig {
            api_key: Some("sk-secret".into()),
            ..EndpointConfig::new("http://x")
        };
        assert!(!serde_json::to_string(&cfg).unwrap().contains("sk-secret"));
    }
}
