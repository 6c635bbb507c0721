//! On-disk index artifacts: `manifest.toml` plus content-addressed bincode
//! blobs under `<out-dir>/index/`. A re-run whose index key matches the
//! manifest loads the blobs instead of rebuilding.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    build_dense_index, build_sparse_index, corpus_digest, read_sources, Bm25Params, ChunkConfig, Corpus, DenseIndex,
    IndexError, SparseIndex, DEFAULT_N_TREES,
};
use crate::gateway::Embedder;
use crate::grammar::Grammar;

pub const MANIFEST_FILE: &str = "manifest.toml";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSettings {
    pub chunking: ChunkConfig,
    pub bm25: Bm25Params,
    pub n_trees: usize,
}

impl Default for IndexSettings {
    fn default() -> Self {
        Self {
            chunking: ChunkConfig::default(),
            bm25: Bm25Params::default(),
            n_trees: DEFAULT_N_TREES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestParameters {
    pub k1: f64,
    pub b: f64,
    pub n_trees: usize,
    pub dim: usize,
    pub max_chunk_lines: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
    pub lines: usize,
    pub chunks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestBlobs {
    pub corpus: String,
    pub sparse: String,
    pub dense: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format_version: u32,
    pub corpus_digest: String,
    pub index_key: String,
    pub grammar: String,
    pub embedder: String,
    pub parameters: ManifestParameters,
    pub blobs: ManifestBlobs,
    pub files: Vec<ManifestFile>,
}

#[derive(Debug, Clone)]
pub struct IndexBundle {
    pub manifest: IndexManifest,
    pub corpus: Corpus,
    pub sparse: SparseIndex,
    pub dense: DenseIndex,
}

fn index_key(digest: &str, settings: &IndexSettings, embedder: &str) -> String {
    let mut h = Sha256::new();
    h.update(digest.as_bytes());
    h.update(format!(
        "|k1={}|b={}|trees={}|embedder={embedder}",
        settings.bm25.k1, settings.bm25.b, settings.n_trees
    ));
    hex::encode(h.finalize())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IndexError + '_ {
    move |source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_blob<T: Serialize>(path: &Path, value: &T) -> Result<(), IndexError> {
    let bytes = bincode::serialize(value).map_err(|e| IndexError::Corrupt(e.to_string()))?;
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_blob<T: DeserializeOwned>(path: &Path) -> Result<T, IndexError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    bincode::deserialize(&bytes).map_err(|e| IndexError::Corrupt(format!("{}: {e}", path.display())))
}

pub fn index_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("index")
}

/// Loads the index for `root` from `<out_dir>/index/` when the manifest's key
/// matches the current corpus and settings; otherwise chunks, builds and
/// persists it. The boolean reports whether the stored index was reused.
pub fn build_or_load(
    root: &Path,
    out_dir: &Path,
    grammar: &Grammar,
    settings: &IndexSettings,
    embedder: &dyn Embedder,
) -> Result<(IndexBundle, bool), IndexError> {
    let sources = read_sources(root, grammar)?;
    let digest = corpus_digest(&sources, grammar, &settings.chunking);
    let key = index_key(&digest, settings, &embedder.id());
    let dir = index_dir(out_dir);

    if let Some(bundle) = try_load(&dir, &key)? {
        tracing::info!(key = %&key[..12], "reusing stored index");
        return Ok((bundle, true));
    }

    let corpus = Corpus::from_sources(sources, grammar, &settings.chunking)?;
    let sparse = build_sparse_index(&corpus.chunks, settings.bm25)?;
    let dense = build_dense_index(&corpus.chunks, embedder, settings.n_trees)?;

    let short = &key[..16];
    let manifest = IndexManifest {
        format_version: FORMAT_VERSION,
        corpus_digest: digest,
        index_key: key.clone(),
        grammar: grammar.name().to_string(),
        embedder: embedder.id(),
        parameters: ManifestParameters {
            k1: settings.bm25.k1,
            b: settings.bm25.b,
            n_trees: settings.n_trees,
            dim: dense.dim(),
            max_chunk_lines: settings.chunking.max_chunk_lines,
        },
        blobs: ManifestBlobs {
            corpus: format!("corpus-{short}.bin"),
            sparse: format!("sparse-{short}.bin"),
            dense: format!("dense-{short}.bin"),
        },
        files: corpus
            .files
            .values()
            .map(|f| ManifestFile {
                path: f.path.clone(),
                sha256: hex::encode(Sha256::digest(f.source.as_bytes())),
                lines: f.source.lines().count(),
                chunks: f.chunk_ids.len(),
            })
            .collect(),
    };
    let bundle = IndexBundle {
        manifest,
        corpus,
        sparse,
        dense,
    };
    save(&dir, &bundle)?;
    Ok((bundle, false))
}

pub fn save(dir: &Path, bundle: &IndexBundle) -> Result<(), IndexError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_blob(&dir.join(&bundle.manifest.blobs.corpus), &bundle.corpus)?;
    write_blob(&dir.join(&bundle.manifest.blobs.sparse), &bundle.sparse)?;
    write_blob(&dir.join(&bundle.manifest.blobs.dense), &bundle.dense)?;
    let text = toml::to_string_pretty(&bundle.manifest).map_err(|e| IndexError::Corrupt(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn read_manifest(dir: &Path) -> Result<Option<IndexManifest>, IndexError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    toml::from_str(&text)
        .map(Some)
        .map_err(|e| IndexError::Corrupt(format!("{}: {e}", path.display())))
}

fn try_load(dir: &Path, key: &str) -> Result<Option<IndexBundle>, IndexError> {
    let Some(manifest) = read_manifest(dir)? else {
        return Ok(None);
    };
    if manifest.index_key != key || manifest.format_version != FORMAT_VERSION {
        return Ok(None);
    }
    let blobs = [&manifest.blobs.corpus, &manifest.blobs.sparse, &manifest.blobs.dense];
    if blobs.iter().any(|b| !dir.join(b).exists()) {
        return Ok(None);
    }
    let mut corpus: Corpus = read_blob(&dir.join(&manifest.blobs.corpus))?;
    corpus.reindex();
    let sparse: SparseIndex = read_blob(&dir.join(&manifest.blobs.sparse))?;
    let mut dense: DenseIndex = read_blob(&dir.join(&manifest.blobs.dense))?;
    dense.reindex();
    Ok(Some(IndexBundle {
        manifest,
        corpus,
        sparse,
        dense,
    }))
}
