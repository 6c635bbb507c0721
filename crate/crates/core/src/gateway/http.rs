//! Blocking client for OpenAI-compatible endpoints.
//!
//! Completions go to `POST {endpoint}/chat/completions`, embeddings to
//! `POST {endpoint}/embeddings` and cross-scores to `POST {endpoint}/rerank`.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{
    completion_payload, request_digest, CompletionProvider, CompletionRequest, CrossScorer, Embedder, ExchangeKind,
    GatewayError, ProviderConfig,
};

pub struct HttpProvider {
    config: ProviderConfig,
    client: reqwest::blocking::Client,
    last_request: Mutex<Option<Instant>>,
}

impl HttpProvider {
    pub fn new(config: ProviderConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| GatewayError::Provider {
                digest: String::new(),
                message: format!("cannot build http client: {e}"),
            })?;
        Ok(Self {
            config,
            client,
            last_request: Mutex::new(None),
        })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn throttle(&self) {
        if self.config.min_request_interval_ms == 0 {
            return;
        }
        let gap = Duration::from_millis(self.config.min_request_interval_ms);
        let mut last = self.last_request.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < gap {
                std::thread::sleep(gap - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    /// POSTs `body` with retries and exponential backoff on transport
    /// errors, 429 and 5xx responses.
    fn post(&self, path: &str, body: &Value, digest: &str) -> Result<Value, GatewayError> {
        let url = format!("{}/{}", self.config.endpoint.trim_end_matches('/'), path);
        let key = std::env::var(&self.config.api_key_env).ok();
        let mut last_error = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(250 * (1 << (attempt - 1).min(6))));
            }
            self.throttle();
            let mut req = self.client.post(&url).json(body);
            if let Some(key) = &key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp.json::<Value>().map_err(|e| GatewayError::Provider {
                            digest: digest.to_string(),
                            message: format!("invalid JSON from {url}: {e}"),
                        });
                    }
                    last_error = format!("HTTP {status} from {url}");
                    if !(status.as_u16() == 429 || status.is_server_error()) {
                        break;
                    }
                }
                Err(e) if e.is_timeout() => {
                    last_error = format!("timeout contacting {url}");
                    if attempt == self.config.max_retries {
                        return Err(GatewayError::Timeout {
                            digest: digest.to_string(),
                            secs: self.config.timeout_secs,
                        });
                    }
                }
                Err(e) => last_error = format!("transport error contacting {url}: {e}"),
            }
        }
        Err(GatewayError::Provider {
            digest: digest.to_string(),
            message: last_error,
        })
    }
}

fn malformed(digest: &str, what: &str) -> GatewayError {
    GatewayError::Provider {
        digest: digest.to_string(),
        message: format!("response lacks {what}"),
    }
}

impl CompletionProvider for HttpProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let digest = request_digest(ExchangeKind::Complete, &completion_payload(request, &self.config.params));
        let p = &self.config.params;
        let body = json!({
            "model": self.config.model_for(request.role.as_str()),
            "messages": request.messages,
            "temperature": p.temperature,
            "top_p": p.top_p,
            "top_k": p.top_k,
            "repetition_penalty": p.repetition_penalty,
            "max_tokens": p.max_tokens,
        });
        let resp = self.post("chat/completions", &body, &digest)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| malformed(&digest, "choices[0].message.content"))
    }
}

impl Embedder for HttpProvider {
    fn id(&self) -> String {
        format!("http:{}", self.config.model_for("embed"))
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        let model = self.config.model_for("embed");
        let digest = request_digest(ExchangeKind::Embed, &json!({ "model": model, "input": text }));
        let resp = self.post("embeddings", &json!({ "model": model, "input": text }), &digest)?;
        resp.pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .map(|xs| xs.iter().filter_map(Value::as_f64).map(|x| x as f32).collect())
            .ok_or_else(|| malformed(&digest, "data[0].embedding"))
    }
}

impl CrossScorer for HttpProvider {
    fn cross_score(&self, query: &str, doc: &str) -> Result<f64, GatewayError> {
        let model = self.config.model_for("rerank");
        let body = json!({ "model": model, "query": query, "documents": [doc] });
        let digest = request_digest(ExchangeKind::CrossScore, &body);
        let resp = self.post("rerank", &body, &digest)?;
        resp.pointer("/results/0/relevance_score")
            .and_then(Value::as_f64)
            .map(|s| s.clamp(0.0, 1.0))
            .ok_or_else(|| malformed(&digest, "results[0].relevance_score"))
    }
}
