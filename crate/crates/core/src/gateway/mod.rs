//! Provider interface for completion, embedding and cross-scoring.
//!
//! Every model call in the pipeline goes through one of the three traits
//! below. [`http`] talks to an OpenAI-compatible endpoint, [`replay`] wraps
//! any provider with a digest-keyed exchange log, and [`mock`] holds the
//! deterministic stand-ins used by the tests.

pub mod http;
pub mod mock;
pub mod replay;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("provider failure (request {digest}): {message}")]
    Provider { digest: String, message: String },
    #[error("request {digest} timed out after {secs}s")]
    Timeout { digest: String, secs: u64 },
    #[error("no recorded {kind} exchange for request digest {digest}")]
    ReplayMiss { digest: String, kind: ExchangeKind },
    #[error("exchange log error: {0}")]
    Log(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeKind {
    Complete,
    Embed,
    CrossScore,
}

impl fmt::Display for ExchangeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExchangeKind::Complete => "complete",
            ExchangeKind::Embed => "embed",
            ExchangeKind::CrossScore => "cross_score",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Which model family serves a request. Text processing and code work may
/// be routed to different models through [`ProviderConfig::model_map`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Text,
    Code,
}

impl ModelRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelRole::Text => "text",
            ModelRole::Code => "code",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub role: ModelRole,
    /// Pipeline step issuing the call, e.g. `restructure_report`.
    pub task: String,
    pub messages: Vec<Message>,
}

impl CompletionRequest {
    pub fn new(role: ModelRole, task: impl Into<String>, messages: Vec<Message>) -> Self {
        Self {
            role,
            task: task.into(),
            messages,
        }
    }

    /// Concatenated message contents, handy for assertions on prompts.
    pub fn prompt_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

pub trait CompletionProvider: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError>;
}

pub trait Embedder: Send + Sync {
    /// Identity string folded into index keys so a different model forces a rebuild.
    fn id(&self) -> String;
    fn embed(&self, text: &str) -> Result<Vec<f32>, GatewayError>;
}

pub trait CrossScorer: Send + Sync {
    /// Relevance of `doc` to `query`, in `[0, 1]`.
    fn cross_score(&self, query: &str, doc: &str) -> Result<f64, GatewayError>;
}

impl<T: CompletionProvider + ?Sized> CompletionProvider for Arc<T> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        (**self).complete(request)
    }
}

impl<T: Embedder + ?Sized> Embedder for Arc<T> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn embed(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        (**self).embed(text)
    }
}

impl<T: CrossScorer + ?Sized> CrossScorer for Arc<T> {
    fn cross_score(&self, query: &str, doc: &str) -> Result<f64, GatewayError> {
        (**self).cross_score(query, doc)
    }
}

/// Sampling parameters serialized into every completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub repetition_penalty: f64,
    pub max_tokens: u32,
}

impl Default for GenerationParams {
    /// Recommended sampling settings of the Qwen2.5 instruct models.
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.8,
            top_k: 20,
            repetition_penalty: 1.05,
            max_tokens: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub endpoint: String,
    /// Model per role: `text`, `code`, `embed`, `rerank`.
    pub model_map: BTreeMap<String, String>,
    pub params: GenerationParams,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub api_key_env: String,
    /// Minimum spacing between requests to one provider.
    pub min_request_interval_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        let model_map = [
            ("text", "Qwen2.5-7B-Instruct"),
            ("code", "Qwen2.5-Coder-7B-Instruct"),
            ("embed", "code-embedding"),
            ("rerank", "ms-marco-MiniLM-L12-v2"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        Self {
            endpoint: "http://127.0.0.1:8000/v1".to_string(),
            model_map,
            params: GenerationParams::default(),
            timeout_secs: 120,
            max_retries: 3,
            api_key_env: "DLREPRO_API_KEY".to_string(),
            min_request_interval_ms: 0,
        }
    }
}

impl ProviderConfig {
    pub fn model_for(&self, role: &str) -> String {
        self.model_map.get(role).cloned().unwrap_or_else(|| role.to_string())
    }

    /// Parses `role=model[,role=model...]` into the model map.
    pub fn apply_model_map(&mut self, spec: &str) -> Result<(), String> {
        for pair in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (role, model) = pair
                .split_once('=')
                .ok_or_else(|| format!("model-map entry `{pair}` is not role=model"))?;
            self.model_map.insert(role.trim().to_string(), model.trim().to_string());
        }
        Ok(())
    }
}

/// Hex SHA-256 over the canonical JSON of a request; identical requests map
/// to identical digests on every platform.
pub fn request_digest(kind: ExchangeKind, payload: &serde_json::Value) -> String {
    let canonical = serde_json::json!({ "kind": kind, "payload": payload });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

pub(crate) fn completion_payload(request: &CompletionRequest, params: &GenerationParams) -> serde_json::Value {
    serde_json::json!({
        "role": request.role,
        "task": request.task,
        "messages": request.messages,
        "params": params,
    })
}

/// The three providers a pipeline run needs.
#[derive(Clone)]
pub struct Gateway {
    pub completion: Arc<dyn CompletionProvider>,
    pub embedder: Arc<dyn Embedder>,
    pub scorer: Arc<dyn CrossScorer>,
}

impl Gateway {
    pub fn new(
        completion: Arc<dyn CompletionProvider>,
        embedder: Arc<dyn Embedder>,
        scorer: Arc<dyn CrossScorer>,
    ) -> Self {
        Self {
            completion,
            embedder,
            scorer,
        }
    }
}
