use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forest::{Forest, DEFAULT_LEAF_SIZE};
use super::{ChunkId, CodeChunk, IndexError};
use crate::gateway::Embedder;

pub const DEFAULT_N_TREES: usize = 50;

/// Unit-norm chunk embeddings plus the ANN forest built over them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseIndex {
    ids: Vec<ChunkId>,
    vectors: Vec<Vec<f32>>,
    dim: usize,
    n_trees: usize,
    forest: Forest,
    #[serde(skip)]
    by_id: HashMap<ChunkId, usize>,
}

impl PartialEq for DenseIndex {
    fn eq(&self, other: &Self) -> bool {
        self.ids == other.ids && self.vectors == other.vectors && self.dim == other.dim && self.forest == other.forest
    }
}

/// Scales `v` to unit L2 norm (accumulated in f64); `None` for zero vectors.
pub fn normalize(v: &[f32]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|&x| (f64::from(x) / norm) as f32).collect())
}

pub fn build_dense_index(chunks: &[CodeChunk], embed: &dyn Embedder, n_trees: usize) -> Result<DenseIndex, IndexError> {
    if chunks.is_empty() {
        return Err(IndexError::NoChunks);
    }
    if n_trees == 0 {
        return Err(IndexError::InvalidParameter("n_trees must be at least 1".into()));
    }
    let raw: Vec<Vec<f32>> = chunks
        .par_iter()
        .map(|c| {
            embed.embed(&c.text).map_err(|source| IndexError::Provider {
                chunk_id: c.id.to_string(),
                source,
            })
        })
        .collect::<Result<_, _>>()?;

    let dim = raw[0].len();
    let mut vectors = Vec::with_capacity(raw.len());
    for (chunk, v) in chunks.iter().zip(raw) {
        if v.len() != dim || dim == 0 {
            return Err(IndexError::EmbeddingDimMismatch {
                chunk_id: chunk.id.to_string(),
                expected: dim,
                got: v.len(),
            });
        }
        let unit = normalize(&v).ok_or_else(|| IndexError::DegenerateEmbedding {
            chunk_id: chunk.id.to_string(),
        })?;
        vectors.push(unit);
    }
    let forest = Forest::build(&vectors, n_trees, DEFAULT_LEAF_SIZE);
    let mut index = DenseIndex {
        ids: chunks.iter().map(|c| c.id.clone()).collect(),
        vectors,
        dim,
        n_trees,
        forest,
        by_id: HashMap::new(),
    };
    index.reindex();
    Ok(index)
}

impl DenseIndex {
    pub fn reindex(&mut self) {
        self.by_id = self.ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_trees(&self) -> usize {
        self.n_trees
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ChunkId] {
        &self.ids
    }

    pub fn vector(&self, id: &ChunkId) -> Option<&[f32]> {
        self.by_id.get(id).map(|&i| self.vectors[i].as_slice())
    }

    /// Approximate top-`k` stored ids by cosine similarity to the unit query.
    pub fn nearest(&self, q: &[f32], k: usize) -> Vec<(ChunkId, f32)> {
        self.nearest_with_budget(q, k, None)
    }

    pub fn nearest_with_budget(&self, q: &[f32], k: usize, search_k: Option<usize>) -> Vec<(ChunkId, f32)> {
        self.forest
            .query(&self.vectors, q, k, search_k)
            .into_iter()
            .map(|(i, s)| (self.ids[i].clone(), s))
            .collect()
    }
}
