//! Query-time ranking: BM25 and angular similarity fused into a hybrid
//! score, cross-encoder reranking, and dependency pull-in.

mod deps;

pub use deps::{DependencyClosure, DependencyResolver, PulledChunk, ReferencedSymbol, DEFAULT_DEPENDENCY_DEPTH};

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::dense::normalize;
use crate::corpus::{ChunkId, CodeChunk, Corpus, DenseIndex, SparseIndex};
use crate::gateway::{CrossScorer, Embedder, GatewayError};
use crate::tokenize::tokenize;

pub const DEFAULT_ALPHA: f64 = 0.55;
pub const DEFAULT_TOP_K: usize = 20;
/// Each index contributes its top `POOL_FACTOR * k` to the fused pool.
pub const POOL_FACTOR: usize = 4;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("chunk {0} is not in the index")]
    UnknownChunk(ChunkId),
    #[error("vector dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("the index holds no chunks")]
    EmptyIndex,
    #[error("invalid retrieval parameter: {0}")]
    InvalidParameter(String),
    #[error("query text is empty or embeds to a zero vector")]
    DegenerateQuery,
    #[error("embedding the query failed: {0}")]
    Embedding(#[source] GatewayError),
    #[error("cross-scorer failed on every snippet: {0}")]
    ScorerFailure(#[source] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBundle {
    pub raw_text: String,
    /// Distinct query terms in first-occurrence order.
    pub terms: Vec<String>,
    pub vector: Vec<f32>,
}

impl QueryBundle {
    pub fn new(raw_text: &str, embedder: &dyn Embedder) -> Result<Self, RetrievalError> {
        let vector = embedder.embed(raw_text).map_err(RetrievalError::Embedding)?;
        Self::from_parts(raw_text, &vector)
    }

    pub fn from_parts(raw_text: &str, vector: &[f32]) -> Result<Self, RetrievalError> {
        let vector = normalize(vector).ok_or(RetrievalError::DegenerateQuery)?;
        let mut seen = BTreeSet::new();
        let terms = tokenize(raw_text).into_iter().filter(|t| seen.insert(t.clone())).collect();
        Ok(Self {
            raw_text: raw_text.to_string(),
            terms,
            vector,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSnippet {
    pub chunk: CodeChunk,
    pub bm25_raw: f64,
    pub bm25_norm: f64,
    pub angular: f64,
    pub hybrid: f64,
    pub cross_score: Option<f64>,
    /// Reranking was attempted and the scorer failed for this snippet.
    pub unscored: bool,
}

impl ScoredSnippet {
    /// Score used for module priority: cross-score when reranked, hybrid otherwise.
    pub fn priority(&self) -> f64 {
        self.cross_score.unwrap_or(self.hybrid)
    }
}

fn idf(n: usize, n_t: usize) -> f64 {
    let (n, n_t) = (n as f64, n_t as f64);
    (1.0 + (n - n_t + 0.5) / (n_t + 0.5)).ln()
}

pub fn bm25_score(query: &QueryBundle, chunk_id: &ChunkId, index: &SparseIndex) -> Result<f64, RetrievalError> {
    let len = index
        .doc_length(chunk_id)
        .ok_or_else(|| RetrievalError::UnknownChunk(chunk_id.clone()))? as f64;
    let p = index.params();
    let norm = p.k1 * (1.0 - p.b + p.b * len / index.avg_doc_length());
    let mut score = 0.0;
    for term in &query.terms {
        let f = index.term_frequency(term, chunk_id) as f64;
        if f == 0.0 {
            continue;
        }
        score += idf(index.doc_count(), index.doc_frequency(term)) * f * (p.k1 + 1.0) / (f + norm);
    }
    Ok(score)
}

/// BM25 for every chunk containing at least one query term.
fn bm25_all(query: &QueryBundle, index: &SparseIndex) -> BTreeMap<ChunkId, f64> {
    let mut hits = BTreeSet::new();
    for term in &query.terms {
        hits.extend(index.postings(term).iter().map(|p| p.chunk_id.clone()));
    }
    hits.into_iter()
        .filter_map(|id| bm25_score(query, &id, index).ok().map(|s| (id, s)))
        .collect()
}

pub fn angular_similarity(q: &[f32], d: &[f32]) -> Result<f64, RetrievalError> {
    if q.len() != d.len() {
        return Err(RetrievalError::DimMismatch {
            expected: q.len(),
            got: d.len(),
        });
    }
    let dot: f64 = q.iter().zip(d).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
    Ok(1.0 - dot.clamp(-1.0, 1.0).acos() / std::f64::consts::PI)
}

/// Knobs for [`hybrid_rank_with`]; ablations switch either index off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridOptions {
    pub alpha: f64,
    pub k: usize,
    pub use_sparse: bool,
    pub use_dense: bool,
    /// Forest search budget; `None` uses `n_trees * pool size`.
    pub search_k: Option<usize>,
}

impl Default for HybridOptions {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            k: DEFAULT_TOP_K,
            use_sparse: true,
            use_dense: true,
            search_k: None,
        }
    }
}

/// Min–max normalization with a degenerate-range rule: equal values map to 1
/// when positive and 0 otherwise.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| {
            if hi > lo {
                (v - lo) / (hi - lo)
            } else if v > 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

pub(crate) fn by_score_then_id(a: (f64, &ChunkId), b: (f64, &ChunkId)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

pub fn hybrid_rank(
    query: &QueryBundle,
    corpus: &Corpus,
    sparse: &SparseIndex,
    dense: &DenseIndex,
    alpha: f64,
    k: usize,
) -> Result<Vec<ScoredSnippet>, RetrievalError> {
    hybrid_rank_with(
        query,
        corpus,
        sparse,
        dense,
        HybridOptions {
            alpha,
            k,
            ..Default::default()
        },
    )
}

pub fn hybrid_rank_with(
    query: &QueryBundle,
    corpus: &Corpus,
    sparse: &SparseIndex,
    dense: &DenseIndex,
    opts: HybridOptions,
) -> Result<Vec<ScoredSnippet>, RetrievalError> {
    if !(0.0..=1.0).contains(&opts.alpha) {
        return Err(RetrievalError::InvalidParameter(format!("alpha {} outside [0, 1]", opts.alpha)));
    }
    if opts.k == 0 {
        return Err(RetrievalError::InvalidParameter("k must be at least 1".into()));
    }
    if sparse.doc_count() == 0 || dense.is_empty() || corpus.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    if query.vector.len() != dense.dim() {
        return Err(RetrievalError::DimMismatch {
            expected: dense.dim(),
            got: query.vector.len(),
        });
    }
    let pool_size = POOL_FACTOR * opts.k;

    let bm25 = bm25_all(query, sparse);
    let mut pool: BTreeSet<ChunkId> = BTreeSet::new();
    if opts.use_sparse {
        let mut ranked: Vec<(&ChunkId, f64)> = bm25.iter().map(|(id, &s)| (id, s)).collect();
        ranked.sort_by(|a, b| by_score_then_id((a.1, a.0), (b.1, b.0)));
        pool.extend(ranked.into_iter().take(pool_size).map(|(id, _)| id.clone()));
    }
    if opts.use_dense {
        let search_k = opts.search_k.or(Some(dense.n_trees() * pool_size));
        pool.extend(
            dense
                .nearest_with_budget(&query.vector, pool_size, search_k)
                .into_iter()
                .map(|(id, _)| id),
        );
    }

    let ids: Vec<ChunkId> = pool.into_iter().collect();
    let raws: Vec<f64> = ids.iter().map(|id| bm25.get(id).copied().unwrap_or(0.0)).collect();
    let norms = min_max(&raws);
    let mut out = Vec::with_capacity(ids.len());
    for ((id, raw), norm) in ids.into_iter().zip(raws).zip(norms) {
        let chunk = corpus.chunk(&id).ok_or_else(|| RetrievalError::UnknownChunk(id.clone()))?;
        let vector = dense.vector(&id).ok_or_else(|| RetrievalError::UnknownChunk(id.clone()))?;
        let angular = angular_similarity(&query.vector, vector)?;
        out.push(ScoredSnippet {
            chunk: chunk.clone(),
            bm25_raw: raw,
            bm25_norm: norm,
            angular,
            hybrid: (1.0 - opts.alpha) * norm + opts.alpha * angular,
            cross_score: None,
            unscored: false,
        });
    }
    out.sort_by(|a, b| by_score_then_id((a.hybrid, &a.chunk.id), (b.hybrid, &b.chunk.id)));
    out.truncate(opts.k);
    Ok(out)
}

/// Attaches cross-scores and re-sorts. Snippets whose scoring fails keep
/// their hybrid order behind the scored ones.
pub fn rerank(
    query: &QueryBundle,
    snippets: Vec<ScoredSnippet>,
    scorer: &dyn CrossScorer,
) -> Result<Vec<ScoredSnippet>, RetrievalError> {
    if snippets.is_empty() {
        return Ok(snippets);
    }
    let results: Vec<Result<f64, GatewayError>> = snippets
        .par_iter()
        .map(|s| scorer.cross_score(&query.raw_text, &s.chunk.text))
        .collect();
    let mut last_error = None;
    let (mut scored, mut unscored): (Vec<ScoredSnippet>, Vec<ScoredSnippet>) = (Vec::new(), Vec::new());
    for (mut snippet, result) in snippets.into_iter().zip(results) {
        match result {
            Ok(score) => {
                snippet.cross_score = Some(score.clamp(0.0, 1.0));
                snippet.unscored = false;
                scored.push(snippet);
            }
            Err(e) => {
                tracing::warn!(chunk = %snippet.chunk.id, error = %e, "cross-scorer failed");
                snippet.cross_score = None;
                snippet.unscored = true;
                unscored.push(snippet);
                last_error = Some(e);
            }
        }
    }
    if scored.is_empty() {
        return Err(RetrievalError::ScorerFailure(last_error.expect("at least one failure")));
    }
    scored.sort_by(|a, b| {
        b.cross_score
            .unwrap_or(0.0)
            .total_cmp(&a.cross_score.unwrap_or(0.0))
            .then_with(|| b.hybrid.total_cmp(&a.hybrid))
            .then_with(|| a.chunk.id.cmp(&b.chunk.id))
    });
    unscored.sort_by(|a, b| by_score_then_id((a.hybrid, &a.chunk.id), (b.hybrid, &b.chunk.id)));
    scored.extend(unscored);
    Ok(scored)
}
