//! Digest-keyed record/replay of provider exchanges.
//!
//! Exchanges are stored as JSON lines. Replaying a digest that was recorded
//! several times returns the responses in recorded order and then repeats
//! the last one. In strict replay a miss is an error, never a live call.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    completion_payload, request_digest, CompletionProvider, CompletionRequest, CrossScorer, Embedder, ExchangeKind,
    GatewayError, GenerationParams,
};

pub const LOG_FILE: &str = "exchanges.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub digest: String,
    pub kind: ExchangeKind,
    pub request: Value,
    pub response: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeMode {
    /// Call the provider and append every exchange to the log.
    Record,
    /// Serve from the store; a miss is [`GatewayError::ReplayMiss`].
    StrictReplay,
    /// Serve from the store; on a miss call the provider and record.
    Replay,
}

#[derive(Default)]
struct Served {
    responses: HashMap<String, Vec<Value>>,
    cursor: HashMap<String, usize>,
    skipped: usize,
}

pub struct ExchangeStore {
    served: Mutex<Served>,
    sink: Mutex<Option<File>>,
    sink_path: Option<PathBuf>,
}

fn log_err(e: impl std::fmt::Display) -> GatewayError {
    GatewayError::Log(e.to_string())
}

impl ExchangeStore {
    pub fn empty() -> Self {
        Self {
            served: Mutex::new(Served::default()),
            sink: Mutex::new(None),
            sink_path: None,
        }
    }

    /// Loads every `*.jsonl` file in `dir` (sorted by name). Unparseable
    /// lines are skipped and counted.
    pub fn load(dir: &Path) -> Result<Self, GatewayError> {
        let store = Self::empty();
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| log_err(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        let mut served = store.served.lock().unwrap_or_else(|e| e.into_inner());
        for path in files {
            let reader = BufReader::new(File::open(&path).map_err(log_err)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(log_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<ExchangeRecord>(&line) {
                    Ok(record) => served.responses.entry(record.digest).or_default().push(record.response),
                    Err(e) => {
                        // A damaged line only loses its own exchange; requests for it miss.
                        tracing::warn!(file = %path.display(), line = n + 1, error = %e, "skipping unreadable exchange record");
                        served.skipped += 1;
                    }
                }
            }
        }
        drop(served);
        Ok(store)
    }

    /// Appends every exchange served or recorded from now on to `dir/exchanges.jsonl`.
    pub fn with_sink(mut self, dir: &Path) -> Result<Self, GatewayError> {
        fs::create_dir_all(dir).map_err(log_err)?;
        let path = dir.join(LOG_FILE);
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(log_err)?;
        self.sink = Mutex::new(Some(file));
        self.sink_path = Some(path);
        Ok(self)
    }

    pub fn sink_path(&self) -> Option<&Path> {
        self.sink_path.as_deref()
    }

    pub fn recorded_digests(&self) -> usize {
        self.served.lock().unwrap_or_else(|e| e.into_inner()).responses.len()
    }

    /// Lines of the loaded logs that could not be parsed.
    pub fn skipped_records(&self) -> usize {
        self.served.lock().unwrap_or_else(|e| e.into_inner()).skipped
    }

    fn next_response(&self, digest: &str) -> Option<Value> {
        let mut served = self.served.lock().unwrap_or_else(|e| e.into_inner());
        let list = served.responses.get(digest)?.clone();
        let cursor = served.cursor.entry(digest.to_string()).or_insert(0);
        let value = list.get(*cursor).or(list.last()).cloned();
        *cursor += 1;
        value
    }

    fn write(&self, record: &ExchangeRecord) -> Result<(), GatewayError> {
        let mut sink = self.sink.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(file) = sink.as_mut() {
            let line = serde_json::to_string(record).map_err(log_err)?;
            writeln!(file, "{line}").map_err(log_err)?;
        }
        Ok(())
    }
}

/// Wraps a provider with the exchange store.
pub struct Recorded<T> {
    inner: Option<T>,
    store: Arc<ExchangeStore>,
    mode: ExchangeMode,
    params: GenerationParams,
}

impl<T> Recorded<T> {
    pub fn new(inner: Option<T>, store: Arc<ExchangeStore>, mode: ExchangeMode, params: GenerationParams) -> Self {
        Self {
            inner,
            store,
            mode,
            params,
        }
    }

    fn serve(
        &self,
        kind: ExchangeKind,
        request: Value,
        live: impl FnOnce(&T) -> Result<Value, GatewayError>,
    ) -> Result<Value, GatewayError> {
        let digest = request_digest(kind, &request);
        if self.mode != ExchangeMode::Record {
            if let Some(response) = self.store.next_response(&digest) {
                self.store.write(&ExchangeRecord {
                    digest,
                    kind,
                    request,
                    response: response.clone(),
                })?;
                return Ok(response);
            }
            if self.mode == ExchangeMode::StrictReplay {
                return Err(GatewayError::ReplayMiss { digest, kind });
            }
        }
        let Some(inner) = &self.inner else {
            return Err(GatewayError::ReplayMiss { digest, kind });
        };
        let response = live(inner)?;
        self.store.write(&ExchangeRecord {
            digest,
            kind,
            request,
            response: response.clone(),
        })?;
        Ok(response)
    }
}

fn unexpected(kind: ExchangeKind, v: &Value) -> GatewayError {
    GatewayError::Log(format!("stored {kind} response has unexpected shape: {v}"))
}

impl<T: CompletionProvider> CompletionProvider for Recorded<T> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let payload = completion_payload(request, &self.params);
        let v = self.serve(ExchangeKind::Complete, payload, |p| p.complete(request).map(Value::String))?;
        v.as_str().map(str::to_string).ok_or_else(|| unexpected(ExchangeKind::Complete, &v))
    }
}

impl<T: Embedder> Embedder for Recorded<T> {
    fn id(&self) -> String {
        match &self.inner {
            Some(inner) => inner.id(),
            None => "replay".to_string(),
        }
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        let request = json!({ "embedder": self.id(), "input": text });
        let v = self.serve(ExchangeKind::Embed, request, |p| p.embed(text).map(|xs| json!(xs)))?;
        v.as_array()
            .map(|xs| xs.iter().filter_map(Value::as_f64).map(|x| x as f32).collect())
            .ok_or_else(|| unexpected(ExchangeKind::Embed, &v))
    }
}

impl<T: CrossScorer> CrossScorer for Recorded<T> {
    fn cross_score(&self, query: &str, doc: &str) -> Result<f64, GatewayError> {
        let request = json!({ "query": query, "doc": doc });
        let v = self.serve(ExchangeKind::CrossScore, request, |p| p.cross_score(query, doc).map(|s| json!(s)))?;
        v.as_f64()
            .map(|s| s.clamp(0.0, 1.0))
            .ok_or_else(|| unexpected(ExchangeKind::CrossScore, &v))
    }
}

/// Reads a log back as records (used by tooling and tests).
pub fn read_log(path: &Path) -> Result<Vec<ExchangeRecord>, GatewayError> {
    let text = fs::read_to_string(path).map_err(log_err)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(log_err))
        .collect()
}
