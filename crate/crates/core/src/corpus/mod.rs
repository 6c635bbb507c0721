//! Corpus ingestion: AST-bounded chunking plus the sparse and dense indices.

mod chunker;
pub mod dense;
pub mod forest;
pub mod sparse;
pub mod store;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::gateway::GatewayError;
use crate::grammar::Grammar;

pub use chunker::{chunk_file, ChunkConfig};
pub use dense::{build_dense_index, DenseIndex, DEFAULT_N_TREES};
pub use sparse::{build_sparse_index, Bm25Params, Posting, SparseIndex};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("no grammar available for `{path}` (loaded grammar: {grammar})")]
    GrammarUnavailable { path: String, grammar: String },
    #[error("cannot build an index from zero chunks")]
    NoChunks,
    #[error("invalid index parameter: {0}")]
    InvalidParameter(String),
    #[error("embedding for chunk `{chunk_id}` has dimension {got}, expected {expected}")]
    EmbeddingDimMismatch {
        chunk_id: String,
        expected: usize,
        got: usize,
    },
    #[error("embedding for chunk `{chunk_id}` has zero norm")]
    DegenerateEmbedding { chunk_id: String },
    #[error("embedding provider failed on chunk `{chunk_id}`: {source}")]
    Provider {
        chunk_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("index artifact is corrupt: {0}")]
    Corrupt(String),
}

/// Stable chunk identifier: `<file_path>#L<start>-L<end>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChunkId(pub String);

impl ChunkId {
    pub fn new(file_path: &str, span: LineSpan) -> Self {
        Self(format!("{file_path}#L{}-L{}", span.start, span.end))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// 1-based inclusive line range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LineSpan {
    pub start: usize,
    pub end: usize,
}

impl LineSpan {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start >= 1 && start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, other: LineSpan) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn contains_line(&self, line: usize) -> bool {
        self.start <= line && line <= self.end
    }
}

impl fmt::Display for LineSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkKind {
    Function,
    Method,
    Class,
    TopLevelBlock,
}

impl fmt::Display for ChunkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChunkKind::Function => "function",
            ChunkKind::Method => "method",
            ChunkKind::Class => "class",
            ChunkKind::TopLevelBlock => "top_level_block",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeChunk {
    pub id: ChunkId,
    pub file_path: String,
    pub span: LineSpan,
    pub kind: ChunkKind,
    pub text: String,
    pub module_path: String,
    pub token_counts: BTreeMap<String, u32>,
    /// Produced by the line-window fallback rather than the parser.
    pub degraded: bool,
}

impl CodeChunk {
    pub fn doc_length(&self) -> u32 {
        self.token_counts.values().sum()
    }
}

/// Dotted module path relative to the project root; `__init__` collapses
/// into its package directory.
pub fn resolve_module(file_path: &str) -> String {
    let normalized = file_path.replace('\\', "/");
    let stem = match normalized.rsplit_once('.') {
        Some((stem, ext)) if !ext.contains('/') => stem.to_string(),
        _ => normalized.clone(),
    };
    let mut parts: Vec<&str> = stem.split('/').filter(|p| !p.is_empty() && *p != ".").collect();
    if parts.len() > 1 && parts.last() == Some(&"__init__") {
        parts.pop();
    }
    parts.join(".")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFile {
    pub path: String,
    pub module_path: String,
    pub source: String,
    pub chunk_ids: Vec<ChunkId>,
    pub degraded: bool,
}

/// The chunked codebase: every indexed file plus its chunks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub grammar: String,
    pub files: BTreeMap<String, SourceFile>,
    pub chunks: Vec<CodeChunk>,
    #[serde(skip)]
    by_id: HashMap<ChunkId, usize>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.grammar == other.grammar && self.files == other.files && self.chunks == other.chunks
    }
}

impl Corpus {
    /// Chunks every `(relative path, source)` pair. Files are processed in
    /// parallel; the result is ordered by path then span.
    pub fn from_sources(
        sources: Vec<(String, String)>,
        grammar: &Grammar,
        config: &ChunkConfig,
    ) -> Result<Self, IndexError> {
        let chunked: Vec<(String, String, Vec<CodeChunk>)> = sources
            .into_par_iter()
            .map(|(path, source)| {
                let chunks = chunk_file(&path, &source, grammar, config)?;
                Ok((path, source, chunks))
            })
            .collect::<Result<_, IndexError>>()?;

        let mut files = BTreeMap::new();
        let mut chunks = Vec::new();
        for (path, source, file_chunks) in chunked {
            let degraded = file_chunks.iter().any(|c| c.degraded);
            files.insert(
                path.clone(),
                SourceFile {
                    module_path: resolve_module(&path),
                    path,
                    source,
                    chunk_ids: file_chunks.iter().map(|c| c.id.clone()).collect(),
                    degraded,
                },
            );
            chunks.extend(file_chunks);
        }
        chunks.sort_by(|a, b| (&a.file_path, a.span).cmp(&(&b.file_path, b.span)));
        let mut corpus = Self {
            grammar: grammar.name().to_string(),
            files,
            chunks,
            by_id: HashMap::new(),
        };
        corpus.reindex();
        Ok(corpus)
    }

    /// Walks `root` and chunks every file the grammar handles.
    pub fn load(root: &Path, grammar: &Grammar, config: &ChunkConfig) -> Result<Self, IndexError> {
        Self::from_sources(read_sources(root, grammar)?, grammar, config)
    }

    /// Rebuilds the id lookup after deserialization.
    pub fn reindex(&mut self) {
        self.by_id = self
            .chunks
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id.clone(), i))
            .collect();
    }

    pub fn chunk(&self, id: &ChunkId) -> Option<&CodeChunk> {
        self.by_id.get(id).map(|&i| &self.chunks[i])
    }

    pub fn file(&self, path: &str) -> Option<&SourceFile> {
        self.files.get(path)
    }

    pub fn file_for_module(&self, module: &str) -> Option<&SourceFile> {
        self.files.values().find(|f| f.module_path == module)
    }

    pub fn chunks_of<'a>(&'a self, file: &'a SourceFile) -> impl Iterator<Item = &'a CodeChunk> + 'a {
        file.chunk_ids.iter().filter_map(move |id| self.chunk(id))
    }

    /// Chunk of `path` that owns `line`; the first one when windows overlap.
    pub fn chunk_at(&self, path: &str, line: usize) -> Option<&CodeChunk> {
        let file = self.files.get(path)?;
        self.chunks_of(file).find(|c| c.span.contains_line(line))
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

/// Reads every source file under `root` accepted by the grammar, skipping
/// hidden directories, virtualenvs and bytecode caches.
pub fn read_sources(root: &Path, grammar: &Grammar) -> Result<Vec<(String, String)>, IndexError> {
    let mut out = Vec::new();
    let walker = WalkDir::new(root).sort_by_file_name().into_iter().filter_entry(|e| {
        let name = e.file_name().to_string_lossy();
        e.depth() == 0
            || !(name.starts_with('.')
                || name == "__pycache__"
                || name == "node_modules"
                || name == "venv"
                || name == "target")
    });
    for entry in walker {
        let entry = entry.map_err(|e| IndexError::Io {
            path: root.to_path_buf(),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() || !grammar.handles(entry.path()) {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(root)
            .unwrap_or(entry.path())
            .to_string_lossy()
            .replace('\\', "/");
        let bytes = std::fs::read(entry.path()).map_err(|source| IndexError::Io {
            path: entry.path().to_path_buf(),
            source,
        })?;
        match String::from_utf8(bytes) {
            Ok(text) => out.push((rel, text)),
            Err(_) => tracing::warn!(path = %rel, "skipping non-UTF-8 source file"),
        }
    }
    Ok(out)
}

/// Digest over grammar, chunking parameters and every `(path, content)`.
pub fn corpus_digest(sources: &[(String, String)], grammar: &Grammar, config: &ChunkConfig) -> String {
    let mut sorted: Vec<&(String, String)> = sources.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut hasher = Sha256::new();
    hasher.update(grammar.name().as_bytes());
    hasher.update(format!(
        "|{}|{}|{}|",
        config.max_chunk_lines, config.fallback_window, config.fallback_overlap
    ));
    for (path, text) in sorted {
        hasher.update(path.as_bytes());
        hasher.update([0]);
        hasher.update(Sha256::digest(text.as_bytes()));
    }
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_paths() {
        assert_eq!(resolve_module("pkg/sub/train.py"), "pkg.sub.train");
        assert_eq!(resolve_module("pkg/__init__.py"), "pkg");
        assert_eq!(resolve_module("main.py"), "main");
        assert_eq!(resolve_module("./a/b.py"), "a.b");
    }

    #[test]
    fn corpus_orders_and_looks_up_chunks() {
        let g = Grammar::python();
        let corpus = Corpus::from_sources(
            vec![
                ("b.py".into(), "def g():\n    return 2\n".into()),
                ("a.py".into(), "def f():\n    return 1\n\ndef h():\n    pass\n".into()),
            ],
            &g,
            &ChunkConfig::default(),
        )
        .unwrap();
        let ids: Vec<&str> = corpus.chunks.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, vec!["a.py#L1-L3", "a.py#L4-L5", "b.py#L1-L2"]);
        assert_eq!(corpus.chunk_at("a.py", 4).unwrap().id.as_str(), "a.py#L4-L5");
        assert_eq!(corpus.file_for_module("b").unwrap().path, "b.py");
    }
}
