//! End-to-end driver: index, context construction, restructuring, planning,
//! the agent loop and post-hoc verification, with every intermediate
//! artifact persisted under the output directory.

pub mod advisory;
pub mod config;

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

pub use config::{Component, EmbedderKind, ProviderMode, ProviderSettings, RunConfig, ScorerKind};

use crate::agent::lint::StaticAnalyzer;
use crate::agent::{run_agent, AgentOutcome, LiveStages, OutcomeStatus};
use crate::context::{extract_training_loops, rank_loops};
use crate::context::{assemble_contexts, batch_snippets, partition_modules, ReproductionContext};
use crate::corpus::store::{build_or_load, IndexBundle, IndexSettings};
use crate::corpus::{Corpus, IndexError};
use crate::gateway::http::HttpProvider;
use crate::gateway::mock::{HashEmbedder, JaccardScorer};
use crate::gateway::replay::{ExchangeMode, ExchangeStore, Recorded, LOG_FILE};
use crate::gateway::{CompletionProvider, CrossScorer, Embedder, Gateway, GatewayError};
use crate::grammar::{Grammar, GrammarError};
use crate::oracle::{SymptomOracle, Taxonomy, TaxonomyError};
use crate::plan::{generate_plan, ReproductionPlan};
use crate::pyast;
use crate::report::{restructure, BugReport, RestructuredReport};
use crate::retrieval::DependencyResolver;
use crate::retrieval::{hybrid_rank_with, rerank, HybridOptions, QueryBundle, RetrievalError, ScoredSnippet};
use crate::verify::{execute_trials, verify, BugSignature, SandboxConfig, VerificationVerdict, VerifyError};

pub const LOCK_FILE: &str = ".dlrepro.lock";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const VERDICT_FILE: &str = "verdict.json";
pub const ADVISORY_FILE: &str = "advisory.json";
pub const STRUCTURED_REPORT_FILE: &str = "report.structured.md";
pub const OUTCOME_FILE: &str = "outcome.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error("{0}")]
    Report(String),
    #[error("provider failure: {0} (check --provider-url, the API key variable, or the replay log)")]
    Provider(#[from] GatewayError),
    #[error("indexing failed: {0}")]
    Index(#[from] IndexError),
    #[error("retrieval failed: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("output directory {dir} is in use by another run; remove {lock} if no run is active")]
    Locked { dir: PathBuf, lock: PathBuf },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Taxonomy(_) => 2,
            PipelineError::Grammar(_) => 3,
            PipelineError::Report(_) => 4,
            PipelineError::Provider(_) | PipelineError::Retrieval(RetrievalError::Embedding(_)) => 5,
            PipelineError::Index(IndexError::Provider { .. }) => 5,
            PipelineError::Index(_) | PipelineError::Retrieval(_) => 6,
            PipelineError::Locked { .. } => 7,
            PipelineError::Io { .. } => 8,
            PipelineError::Verify(_) => 9,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    write(path, text + "\n")
}

/// Exclusive claim on an output directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(out_dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        let path = out_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked {
                dir: out_dir.to_path_buf(),
                lock: path,
            }),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Providers for a run. Every exchange is logged to `<out-dir>/exchanges/`.
pub fn build_gateway(config: &RunConfig) -> Result<Gateway, PipelineError> {
    let settings = &config.provider;
    let store = match (settings.mode, &settings.exchanges) {
        (ProviderMode::Replay, Some(dir)) => ExchangeStore::load(dir)?,
        (ProviderMode::Replay, None) => return Err(PipelineError::Config("replay mode needs an exchanges directory".into())),
        (ProviderMode::Live, _) => ExchangeStore::empty(),
    };
    if store.skipped_records() > 0 {
        tracing::warn!(skipped = store.skipped_records(), "exchange log contains unreadable records");
    }
    let sink_dir = config.out_dir.join("exchanges");
    let sink = sink_dir.join(LOG_FILE);
    if sink.exists() {
        fs::remove_file(&sink).map_err(io_err(&sink))?;
    }
    let store = Arc::new(store.with_sink(&sink_dir)?);
    let params = settings.http.params.clone();
    let (mode, http) = match settings.mode {
        ProviderMode::Replay => (ExchangeMode::StrictReplay, None),
        ProviderMode::Live => (ExchangeMode::Record, Some(Arc::new(HttpProvider::new(settings.http.clone())?))),
    };
    let completion: Arc<dyn CompletionProvider> = Arc::new(Recorded::new(http.clone(), store.clone(), mode, params.clone()));
    let embedder: Arc<dyn Embedder> = match settings.embedder {
        EmbedderKind::Hash => Arc::new(HashEmbedder::new(settings.hash_dim, settings.hash_seed)),
        EmbedderKind::Http => Arc::new(Recorded::new(http.clone(), store.clone(), mode, params.clone())),
    };
    let scorer: Arc<dyn CrossScorer> = match settings.scorer {
        ScorerKind::Jaccard => Arc::new(JaccardScorer),
        ScorerKind::Http => Arc::new(Recorded::new(http, store, mode, params)),
    };
    Ok(Gateway::new(completion, embedder, scorer))
}

#[derive(Debug, Clone, Serialize)]
pub struct IndexSummary {
    pub files: usize,
    pub chunks: usize,
    pub reused: bool,
    pub index_key: String,
}

fn load_index(config: &RunConfig, grammar: &Grammar, gateway: &Gateway) -> Result<(IndexBundle, bool), PipelineError> {
    if !config.repo.is_dir() {
        return Err(PipelineError::Config(format!("repository {} is not a directory", config.repo.display())));
    }
    Ok(build_or_load(&config.repo, &config.out_dir, grammar, &IndexSettings::default(), gateway.embedder.as_ref())?)
}

pub fn cmd_index(config: &RunConfig, gateway: &Gateway) -> Result<IndexSummary, PipelineError> {
    config.validate().map_err(PipelineError::Config)?;
    let grammar = Grammar::by_name(&config.grammar)?;
    let _lock = RunLock::acquire(&config.out_dir)?;
    let (bundle, reused) = load_index(config, &grammar, gateway)?;
    Ok(IndexSummary {
        files: bundle.corpus.files.len(),
        chunks: bundle.corpus.len(),
        reused,
        index_key: bundle.manifest.index_key,
    })
}

#[derive(Debug, Clone, Serialize)]
struct RetrievedSnippet<'a> {
    chunk: &'a str,
    module: &'a str,
    bm25_raw: f64,
    bm25_norm: f64,
    angular: f64,
    hybrid: f64,
    cross_score: Option<f64>,
    unscored: bool,
}

#[derive(Debug, Clone, Serialize)]
struct ContextSummary<'a> {
    rank: usize,
    module_id: &'a str,
    priority: f64,
    snippets: Vec<&'a str>,
    training_loop: Option<String>,
    dependencies: usize,
    token_budget_used: usize,
    evicted: Vec<&'a str>,
    loop_truncated: bool,
}

/// Retrieval, module partitioning, loop selection and context assembly.
pub fn build_contexts(
    config: &RunConfig,
    bundle: &IndexBundle,
    report: &BugReport,
    grammar: &Grammar,
    gateway: &Gateway,
) -> Result<(Vec<ReproductionContext>, Vec<ScoredSnippet>), PipelineError> {
    let use_sparse = !config.disabled(Component::Bm25);
    let use_dense = !config.disabled(Component::Ann);
    if !use_sparse && !use_dense {
        return Err(PipelineError::Config("disabling both ann and bm25 leaves no retrieval signal".into()));
    }
    let query = QueryBundle::new(&report.query_text(), gateway.embedder.as_ref())?;
    let opts = HybridOptions {
        alpha: config.effective_alpha(),
        k: config.top_k,
        use_sparse,
        use_dense,
        search_k: None,
    };
    let mut snippets = hybrid_rank_with(&query, &bundle.corpus, &bundle.sparse, &bundle.dense, opts)?;
    if !config.disabled(Component::Reranker) {
        match rerank(&query, snippets.clone(), gateway.scorer.as_ref()) {
            Ok(s) => snippets = s,
            Err(e) => tracing::warn!(error = %e, "reranking failed; keeping hybrid order"),
        }
    }
    let groups = if config.disabled(Component::Partitioning) {
        batch_snippets(&snippets, config.max_modules)
    } else {
        partition_modules(&snippets, config.max_modules)
    };
    let loops: Vec<_> = groups
        .iter()
        .map(|g| {
            if config.disabled(Component::LoopExtraction) {
                return None;
            }
            let found = extract_training_loops(g, grammar);
            if config.disabled(Component::LoopRanking) {
                found.into_iter().next()
            } else {
                rank_loops(found, &query, gateway.scorer.as_ref())
            }
        })
        .collect();
    let resolver = (!config.disabled(Component::Dependency))
        .then(|| DependencyResolver::new(&bundle.corpus, grammar.clone(), config.dependency_depth));
    let contexts = assemble_contexts(&groups, &loops, resolver.as_ref(), config.token_budget);
    Ok((contexts, snippets))
}

fn persist_contexts(out: &Path, contexts: &[ReproductionContext], snippets: &[ScoredSnippet]) -> Result<(), PipelineError> {
    let dir = out.join("contexts");
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    for c in contexts {
        write(&dir.join(format!("context_{}.md", c.rank)), &c.rendered)?;
    }
    let retrieved: Vec<RetrievedSnippet<'_>> = snippets
        .iter()
        .map(|s| RetrievedSnippet {
            chunk: s.chunk.id.as_str(),
            module: &s.chunk.module_path,
            bm25_raw: s.bm25_raw,
            bm25_norm: s.bm25_norm,
            angular: s.angular,
            hybrid: s.hybrid,
            cross_score: s.cross_score,
            unscored: s.unscored,
        })
        .collect();
    write_json(&dir.join("retrieval.json"), &retrieved)?;
    let summary: Vec<ContextSummary<'_>> = contexts
        .iter()
        .map(|c| ContextSummary {
            rank: c.rank,
            module_id: &c.module_id,
            priority: c.priority,
            snippets: c.snippets.iter().map(|s| s.chunk.id.as_str()).collect(),
            training_loop: c
                .training_loop
                .as_ref()
                .map(|l| format!("{}:{}-{}", l.file_path, l.span.start, l.span.end)),
            dependencies: c.dependencies.pulled_chunks.len(),
            token_budget_used: c.token_budget_used,
            evicted: c.evicted.iter().map(|e| e.as_str()).collect(),
            loop_truncated: c.loop_truncated,
        })
        .collect();
    write_json(&dir.join("contexts.json"), &summary)
}

/// Top-level modules a generated script may import: the project's own
/// packages plus everything the project imports.
pub fn corpus_import_allowlist(corpus: &Corpus, grammar: &Grammar) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for file in corpus.files.values() {
        if let Some(top) = file.module_path.split('.').next().filter(|s| !s.is_empty()) {
            out.insert(top.to_string());
        }
        if let Some(tree) = grammar.parse(&file.source) {
            for import in pyast::all_imports(tree.root_node(), &file.source) {
                if let Some(top) = import.module.split('.').next().filter(|s| !s.is_empty()) {
                    out.insert(top.to_string());
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct ReproduceSummary {
    pub outcome: AgentOutcome,
    pub contexts: usize,
    pub index_reused: bool,
    pub script_path: Option<PathBuf>,
    pub advisory: advisory::Advisory,
    pub verdict: Option<VerificationVerdict>,
}

#[derive(Debug, Clone, Serialize)]
struct OutcomeRecord<'a> {
    status: OutcomeStatus,
    attempts_total: usize,
    contexts_tried: usize,
    final_context: Option<usize>,
    final_attempt: Option<usize>,
    disabled_components: Vec<&'a str>,
}

/// Steps 1a (contexts), 1b (restructuring), 2 (plans) and 3 (agent), then
/// verification when a signature is given.
pub fn cmd_reproduce(
    config: &RunConfig,
    gateway: &Gateway,
    signature: Option<&Path>,
) -> Result<ReproduceSummary, PipelineError> {
    config.validate().map_err(PipelineError::Config)?;
    let grammar = Grammar::by_name(&config.grammar)?;
    let out = config.out_dir.as_path();
    let lock = RunLock::acquire(out)?;
    let report = BugReport::from_path(&config.report).map_err(|e| PipelineError::Report(e.to_string()))?;
    let signature = signature.map(BugSignature::load).transpose()?;
    let taxonomy = match &config.taxonomy {
        Some(p) => Taxonomy::load(p)?,
        None => Taxonomy::bundled(),
    };
    let (bundle, index_reused) = load_index(config, &grammar, gateway)?;
    let complete = gateway.completion.as_ref();

    let (contexts, snippets) = build_contexts(config, &bundle, &report, &grammar, gateway)?;
    persist_contexts(out, &contexts, &snippets)?;
    tracing::info!(contexts = contexts.len(), snippets = snippets.len(), "contexts built");

    let structured = if config.disabled(Component::Restructuring) {
        RestructuredReport::passthrough(&report)
    } else {
        restructure(&report, complete)
    };
    write(&out.join(STRUCTURED_REPORT_FILE), structured.to_markdown())?;

    let plans: Vec<ReproductionPlan> = contexts
        .iter()
        .take(config.max_contexts)
        .map(|c| {
            if config.disabled(Component::Planning) {
                ReproductionPlan::skeleton(c.rank, &structured)
            } else {
                generate_plan(c, &structured, complete)
            }
        })
        .collect();
    let plans_dir = out.join("plans");
    if plans_dir.exists() {
        fs::remove_dir_all(&plans_dir).map_err(io_err(&plans_dir))?;
    }
    for p in &plans {
        write(&plans_dir.join(format!("plan_{}.md", p.context_rank)), p.to_markdown())?;
    }

    let extra = corpus_import_allowlist(&bundle.corpus, &grammar);
    let analyzer = StaticAnalyzer::new(config.lint_command.clone(), extra, grammar.clone());
    let oracle = SymptomOracle {
        taxonomy,
        threshold: config.similarity_threshold,
    };
    let stages = LiveStages {
        grammar: &grammar,
        analyzer: &analyzer,
        oracle: &oracle,
        complete,
    };
    let used = &contexts[..plans.len()];
    let outcome = run_agent(&structured, used, &plans, &stages, complete, &config.agent_config());
    write(&out.join(TRACE_FILE), outcome.trace_jsonl())?;

    let script_path = out.join(format!("repro.{}", grammar.script_extension()));
    let script_path = match &outcome.final_script {
        Some(s) => {
            write(&script_path, &s.text)?;
            Some(script_path)
        }
        None => {
            if script_path.exists() {
                fs::remove_file(&script_path).map_err(io_err(&script_path))?;
            }
            None
        }
    };
    let advisory = advisory::diagnose(&outcome, &snippets);
    write_json(&out.join(ADVISORY_FILE), &advisory)?;
    write_json(
        &out.join(OUTCOME_FILE),
        &OutcomeRecord {
            status: outcome.status,
            attempts_total: outcome.attempts_total,
            contexts_tried: outcome.contexts_tried,
            final_context: outcome.final_script.as_ref().map(|s| s.context_rank),
            final_attempt: outcome.final_script.as_ref().map(|s| s.attempt),
            disabled_components: config.disabled_components.iter().map(|c| c.as_str()).collect(),
        },
    )?;
    let verdict_path = out.join(VERDICT_FILE);
    if verdict_path.exists() {
        fs::remove_file(&verdict_path).map_err(io_err(&verdict_path))?;
    }
    drop(lock);

    let verdict = match (&signature, &script_path) {
        (Some(sig), Some(path)) => Some(verify_script(config, path, sig)?),
        _ => None,
    };
    Ok(ReproduceSummary {
        contexts: used.len(),
        outcome,
        index_reused,
        script_path,
        advisory,
        verdict,
    })
}

#[derive(Debug, Clone, Serialize)]
struct VerdictFile<'a> {
    #[serde(flatten)]
    verdict: &'a VerificationVerdict,
    script: String,
    signature: &'a BugSignature,
    config: &'a RunConfig,
}

fn verify_script(config: &RunConfig, script: &Path, signature: &BugSignature) -> Result<VerificationVerdict, PipelineError> {
    let _lock = RunLock::acquire(&config.out_dir)?;
    let text = fs::read_to_string(script).map_err(io_err(script))?;
    let sandbox = SandboxConfig {
        python: config.python.clone(),
        timeout: Duration::from_secs(config.trial_timeout_secs.max(1)),
        parallel: false,
        env: Vec::new(),
    };
    let trials = execute_trials(&text, &config.seeds, &sandbox)?;
    let verdict = verify(&trials, signature, config.margin);
    write_json(
        &config.out_dir.join(VERDICT_FILE),
        &VerdictFile {
            verdict: &verdict,
            script: script.display().to_string(),
            signature,
            config,
        },
    )?;
    Ok(verdict)
}

pub fn cmd_verify(config: &RunConfig, script: &Path, signature: &Path) -> Result<VerificationVerdict, PipelineError> {
    config.validate().map_err(PipelineError::Config)?;
    let sig = BugSignature::load(signature)?;
    verify_script(config, script, &sig)
}

/// `cmd_reproduce` with `component` switched off.
pub fn cmd_ablate(
    config: &RunConfig,
    component: Component,
    gateway: &Gateway,
    signature: Option<&Path>,
) -> Result<ReproduceSummary, PipelineError> {
    let mut ablated = config.clone();
    ablated.disabled_components.insert(component);
    cmd_reproduce(&ablated, gateway, signature)
}
