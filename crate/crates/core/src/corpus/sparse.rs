use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ChunkId, CodeChunk, IndexError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    /// Term-frequency saturation.
    pub k1: f64,
    /// Length normalization, in `[0, 1]`.
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub chunk_id: ChunkId,
    pub term_frequency: u32,
}

/// Inverted index over chunk tokens for BM25 scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseIndex {
    postings: BTreeMap<String, Vec<Posting>>,
    doc_lengths: BTreeMap<ChunkId, u32>,
    avg_doc_length: f64,
    doc_count: usize,
    k1: f64,
    b: f64,
}

pub fn build_sparse_index(chunks: &[CodeChunk], params: Bm25Params) -> Result<SparseIndex, IndexError> {
    if chunks.is_empty() {
        return Err(IndexError::NoChunks);
    }
    if !(params.k1 > 0.0 && params.k1.is_finite()) {
        return Err(IndexError::InvalidParameter(format!("k1 must be > 0, got {}", params.k1)));
    }
    if !(0.0..=1.0).contains(&params.b) {
        return Err(IndexError::InvalidParameter(format!("b must lie in [0, 1], got {}", params.b)));
    }

    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    let mut doc_lengths = BTreeMap::new();
    for chunk in chunks {
        for (term, &tf) in &chunk.token_counts {
            if tf == 0 {
                continue;
            }
            postings.entry(term.clone()).or_default().push(Posting {
                chunk_id: chunk.id.clone(),
                term_frequency: tf,
            });
        }
        doc_lengths.insert(chunk.id.clone(), chunk.doc_length());
    }
    for list in postings.values_mut() {
        list.sort_by(|a, b| a.chunk_id.cmp(&b.chunk_id));
    }
    let doc_count = doc_lengths.len();
    let total: u64 = doc_lengths.values().map(|&l| u64::from(l)).sum();
    Ok(SparseIndex {
        postings,
        doc_lengths,
        avg_doc_length: total as f64 / doc_count as f64,
        doc_count,
        k1: params.k1,
        b: params.b,
    })
}

impl SparseIndex {
    pub fn params(&self) -> Bm25Params {
        Bm25Params { k1: self.k1, b: self.b }
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, id: &ChunkId) -> Option<u32> {
        self.doc_lengths.get(id).copied()
    }

    pub fn contains(&self, id: &ChunkId) -> bool {
        self.doc_lengths.contains_key(id)
    }

    pub fn chunk_ids(&self) -> impl Iterator<Item = &ChunkId> {
        self.doc_lengths.keys()
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn terms(&self) -> impl Iterator<Item = (&String, &Vec<Posting>)> {
        self.postings.iter()
    }

    /// Number of chunks containing `term`.
    pub fn doc_frequency(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn term_frequency(&self, term: &str, id: &ChunkId) -> u32 {
        let list = self.postings(term);
        list.binary_search_by(|p| p.chunk_id.cmp(id))
            .map(|i| list[i].term_frequency)
            .unwrap_or(0)
    }
}
