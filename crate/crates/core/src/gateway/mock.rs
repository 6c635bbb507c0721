//! Deterministic providers for hermetic runs.

use std::collections::BTreeSet;
use std::sync::Mutex;

use super::{CompletionProvider, CompletionRequest, CrossScorer, Embedder, GatewayError};
use crate::tokenize::tokenize;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Seeded feature-hashing embedder: each token adds ±1 to a hashed bucket,
/// so texts sharing tokens land close together.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim: dim.max(1), seed }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(256, 0)
    }
}

impl Embedder for HashEmbedder {
    fn id(&self) -> String {
        format!("mock-hash-{}-{}", self.dim, self.seed)
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        let mut v = vec![0f32; self.dim];
        let tokens = tokenize(text);
        if tokens.is_empty() {
            let h = fnv1a(self.seed, text.as_bytes());
            v[(h % self.dim as u64) as usize] = 1.0;
            return Ok(v);
        }
        for token in tokens {
            let h = fnv1a(self.seed, token.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            v[bucket] += if (h >> 63) == 0 { 1.0 } else { -1.0 };
        }
        if v.iter().all(|&x| x == 0.0) {
            v[0] = 1.0;
        }
        Ok(v)
    }
}

/// Token-set Jaccard similarity.
#[derive(Debug, Clone, Copy, Default)]
pub struct JaccardScorer;

impl CrossScorer for JaccardScorer {
    fn cross_score(&self, query: &str, doc: &str) -> Result<f64, GatewayError> {
        let a: BTreeSet<String> = tokenize(query).into_iter().collect();
        let b: BTreeSet<String> = tokenize(doc).into_iter().collect();
        if a.is_empty() && b.is_empty() {
            return Ok(if query == doc { 1.0 } else { 0.0 });
        }
        let inter = a.intersection(&b).count() as f64;
        let union = a.union(&b).count() as f64;
        Ok(inter / union)
    }
}

type Handler = Box<dyn Fn(&CompletionRequest) -> Result<String, GatewayError> + Send + Sync>;

/// Completion provider backed by a closure; every request is captured.
pub struct ScriptedProvider {
    handler: Handler,
    calls: Mutex<Vec<CompletionRequest>>,
}

impl ScriptedProvider {
    pub fn new(handler: impl Fn(&CompletionRequest) -> Result<String, GatewayError> + Send + Sync + 'static) -> Self {
        Self {
            handler: Box::new(handler),
            calls: Mutex::new(Vec::new()),
        }
    }

    /// Always answers `text`.
    pub fn constant(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(move |_| Ok(text.clone()))
    }

    /// Always fails with a provider error.
    pub fn failing() -> Self {
        Self::new(|r| {
            Err(GatewayError::Provider {
                digest: r.task.clone(),
                message: "scripted failure".into(),
            })
        })
    }

    pub fn calls(&self) -> Vec<CompletionRequest> {
        self.calls.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn calls_for(&self, task: &str) -> Vec<CompletionRequest> {
        self.calls().into_iter().filter(|c| c.task == task).collect()
    }
}

impl CompletionProvider for ScriptedProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        self.calls
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(request.clone());
        (self.handler)(request)
    }
}
