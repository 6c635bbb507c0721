use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentConfig, StageSwitches, DEFAULT_MAX_ATTEMPTS, DEFAULT_MAX_CONTEXTS};
use crate::context::{DEFAULT_MAX_MODULES, DEFAULT_TOKEN_BUDGET};
use crate::gateway::ProviderConfig;
use crate::oracle::DEFAULT_THRESHOLD;
use crate::retrieval::DEFAULT_DEPENDENCY_DEPTH;
use crate::retrieval::{DEFAULT_ALPHA, DEFAULT_TOP_K};
use crate::verify::{DEFAULT_MARGIN, DEFAULT_SEEDS};

/// Pipeline pieces that can be switched off for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Restructuring,
    Planning,
    Structural,
    Static,
    Relevance,
    Runtime,
    Ann,
    Bm25,
    Reranker,
    Dependency,
    Partitioning,
    LoopExtraction,
    LoopRanking,
}

impl Component {
    pub const ALL: [Component; 13] = [
        Component::Restructuring,
        Component::Planning,
        Component::Structural,
        Component::Static,
        Component::Relevance,
        Component::Runtime,
        Component::Ann,
        Component::Bm25,
        Component::Reranker,
        Component::Dependency,
        Component::Partitioning,
        Component::LoopExtraction,
        Component::LoopRanking,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Restructuring => "restructuring",
            Component::Planning => "planning",
            Component::Structural => "structural",
            Component::Static => "static",
            Component::Relevance => "relevance",
            Component::Runtime => "runtime",
            Component::Ann => "ann",
            Component::Bm25 => "bm25",
            Component::Reranker => "reranker",
            Component::Dependency => "dependency",
            Component::Partitioning => "partitioning",
            Component::LoopExtraction => "loop_extraction",
            Component::LoopRanking => "loop_ranking",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Component::ALL.into_iter().find(|c| c.as_str() == norm).ok_or_else(|| {
            let names: Vec<&str> = Component::ALL.iter().map(|c| c.as_str()).collect();
            format!("unknown component `{s}`; expected one of: {}", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderMode {
    /// Call the endpoint; every exchange is logged under `<out-dir>/exchanges/`.
    Live,
    /// Serve completions only from recorded logs; a miss is an error.
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Http,
    /// Seeded hash-to-vector embedder, no network.
    Hash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Http,
    /// Token-overlap Jaccard scorer, no network.
    Jaccard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderSettings {
    pub mode: ProviderMode,
    /// Directory of recorded `*.jsonl` exchange logs for replay.
    pub exchanges: Option<PathBuf>,
    pub embedder: EmbedderKind,
    pub scorer: ScorerKind,
    pub hash_dim: usize,
    pub hash_seed: u64,
    pub http: ProviderConfig,
}

impl Default for ProviderSettings {
    fn default() -> Self {
        Self {
            mode: ProviderMode::Live,
            exchanges: None,
            embedder: EmbedderKind::Http,
            scorer: ScorerKind::Http,
            hash_dim: 256,
            hash_seed: 0,
            http: ProviderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub repo: PathBuf,
    pub report: PathBuf,
    pub out_dir: PathBuf,
    pub alpha: f64,
    pub top_k: usize,
    pub max_modules: usize,
    pub max_attempts: usize,
    pub max_contexts: usize,
    pub margin: f64,
    pub seeds: Vec<u64>,
    pub disabled_components: BTreeSet<Component>,
    pub provider: ProviderSettings,
    pub grammar: String,
    pub token_budget: usize,
    pub dependency_depth: usize,
    pub similarity_threshold: f64,
    pub trial_timeout_secs: u64,
    /// External linter command; empty uses the built-in checks only.
    pub lint_command: Vec<String>,
    /// Taxonomy file replacing the bundled one.
    pub taxonomy: Option<PathBuf>,
    /// Interpreter used to run trials.
    pub python: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            repo: PathBuf::from("."),
            report: PathBuf::new(),
            out_dir: PathBuf::from("out"),
            alpha: DEFAULT_ALPHA,
            top_k: DEFAULT_TOP_K,
            max_modules: DEFAULT_MAX_MODULES,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            max_contexts: DEFAULT_MAX_CONTEXTS,
            margin: DEFAULT_MARGIN,
            seeds: DEFAULT_SEEDS.to_vec(),
            disabled_components: BTreeSet::new(),
            provider: ProviderSettings::default(),
            grammar: "python".into(),
            token_budget: DEFAULT_TOKEN_BUDGET,
            dependency_depth: DEFAULT_DEPENDENCY_DEPTH,
            similarity_threshold: DEFAULT_THRESHOLD,
            trial_timeout_secs: 300,
            lint_command: crate::agent::lint::StaticAnalyzer::default_command(),
            taxonomy: None,
            python: "python3".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(format!("alpha {} is outside [0, 1]", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.similarity_threshold) {
            return Err(format!("similarity threshold {} is outside [0, 1]", self.similarity_threshold));
        }
        if !(self.margin >= 0.0) {
            return Err(format!("margin {} must be non-negative", self.margin));
        }
        for (name, v) in [
            ("top_k", self.top_k),
            ("max_modules", self.max_modules),
            ("max_attempts", self.max_attempts),
            ("max_contexts", self.max_contexts),
        ] {
            if v == 0 {
                return Err(format!("{name} must be at least 1"));
            }
        }
        if self.seeds.is_empty() {
            return Err("at least one seed is required".into());
        }
        if self.provider.mode == ProviderMode::Replay && self.provider.exchanges.is_none() {
            return Err("replay mode needs an exchanges directory".into());
        }
        Ok(())
    }

    pub fn disabled(&self, c: Component) -> bool {
        self.disabled_components.contains(&c)
    }

    /// Alpha after retrieval ablations: no ANN keeps only BM25 (0), no BM25
    /// keeps only the angular term (1).
    pub fn effective_alpha(&self) -> f64 {
        match (self.disabled(Component::Ann), self.disabled(Component::Bm25)) {
            (true, false) => 0.0,
            (false, true) => 1.0,
            _ => self.alpha,
        }
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            max_attempts: self.max_attempts,
            max_contexts: self.max_contexts,
            stages: StageSwitches {
                structural: !self.disabled(Component::Structural),
                static_analysis: !self.disabled(Component::Static),
                relevance: !self.disabled(Component::Relevance),
                runtime: !self.disabled(Component::Runtime),
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
