//! Dependency pull-in: free names of a chunk are resolved against the
//! defining module (same file first, then imported corpus modules) and the
//! defining chunks are added up to a fixed transitive depth.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{ChunkId, CodeChunk, Corpus, SourceFile};
use crate::grammar::Grammar;
use crate::pyast::{absolute_module, all_imports, BindingKind, ImportBinding, Resolution, ScopeAnalysis};

pub const DEFAULT_DEPENDENCY_DEPTH: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReferencedSymbol {
    pub name: String,
    /// Defining chunk; `None` when the name is external to the corpus.
    pub defined_in: Option<ChunkId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulledChunk {
    pub chunk: CodeChunk,
    /// 1 for direct dependencies of the root.
    pub depth: usize,
    pub pulled_for: ChunkId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyClosure {
    pub root: ChunkId,
    pub imported_modules: Vec<String>,
    pub referenced_symbols: Vec<ReferencedSymbol>,
    pub pulled_chunks: Vec<PulledChunk>,
    /// The root did not parse; only textual import lines were extracted.
    pub degraded: bool,
}

impl DependencyClosure {
    pub fn empty(root: ChunkId) -> Self {
        Self {
            root,
            imported_modules: Vec::new(),
            referenced_symbols: Vec::new(),
            pulled_chunks: Vec::new(),
            degraded: false,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.imported_modules.is_empty() && self.referenced_symbols.is_empty() && self.pulled_chunks.is_empty()
    }

    /// Union of several closures. A chunk pulled by more than one keeps its
    /// shallowest depth; chunks listed in `exclude` are dropped.
    pub fn merge(root: ChunkId, closures: &[DependencyClosure], exclude: &BTreeSet<ChunkId>) -> Self {
        let mut modules = BTreeSet::new();
        let mut symbols = BTreeSet::new();
        let mut pulled: BTreeMap<ChunkId, PulledChunk> = BTreeMap::new();
        let mut degraded = false;
        for c in closures {
            modules.extend(c.imported_modules.iter().cloned());
            symbols.extend(c.referenced_symbols.iter().cloned());
            degraded |= c.degraded;
            for p in &c.pulled_chunks {
                if exclude.contains(&p.chunk.id) {
                    continue;
                }
                match pulled.get(&p.chunk.id) {
                    Some(existing) if existing.depth <= p.depth => {}
                    _ => {
                        pulled.insert(p.chunk.id.clone(), p.clone());
                    }
                }
            }
        }
        let mut pulled_chunks: Vec<PulledChunk> = pulled.into_values().collect();
        pulled_chunks.sort_by(|a, b| (a.depth, &a.chunk.file_path, a.chunk.span).cmp(&(b.depth, &b.chunk.file_path, b.chunk.span)));
        Self {
            root,
            imported_modules: modules.into_iter().collect(),
            referenced_symbols: symbols.into_iter().collect(),
            pulled_chunks,
            degraded,
        }
    }
}

struct FileFacts {
    parsed: bool,
    analysis: Option<ScopeAnalysis>,
    imports: Vec<ImportBinding>,
}

/// Resolves closures over one corpus, caching per-file parse results.
pub struct DependencyResolver<'a> {
    corpus: &'a Corpus,
    grammar: Grammar,
    max_depth: usize,
    facts: Mutex<HashMap<String, Arc<FileFacts>>>,
}

struct Direct {
    modules: BTreeSet<String>,
    symbols: BTreeSet<ReferencedSymbol>,
    targets: BTreeSet<ChunkId>,
    degraded: bool,
}

fn text_imports(text: &str) -> BTreeSet<String> {
    let re = Regex::new(r"(?m)^\s*(?:from\s+([.\w]+)\s+import\b|import\s+([.\w]+(?:\s*,\s*[.\w]+)*))").expect("static regex");
    let mut out = BTreeSet::new();
    for cap in re.captures_iter(text) {
        if let Some(m) = cap.get(1) {
            out.insert(m.as_str().to_string());
        } else if let Some(list) = cap.get(2) {
            out.extend(list.as_str().split(',').map(|s| s.trim().to_string()));
        }
    }
    out
}

impl<'a> DependencyResolver<'a> {
    pub fn new(corpus: &'a Corpus, grammar: Grammar, max_depth: usize) -> Self {
        Self {
            corpus,
            grammar,
            max_depth,
            facts: Mutex::new(HashMap::new()),
        }
    }

    fn facts(&self, file: &SourceFile) -> Arc<FileFacts> {
        if let Some(f) = self.facts.lock().unwrap_or_else(|e| e.into_inner()).get(&file.path) {
            return f.clone();
        }
        let parsed = !file.degraded && self.grammar.first_syntax_error(&file.source).is_none();
        let facts = match (parsed, self.grammar.parse(&file.source)) {
            (true, Some(tree)) => FileFacts {
                parsed: true,
                analysis: Some(ScopeAnalysis::analyze(tree.root_node(), &file.source)),
                imports: all_imports(tree.root_node(), &file.source),
            },
            _ => FileFacts {
                parsed: false,
                analysis: None,
                imports: Vec::new(),
            },
        };
        let facts = Arc::new(facts);
        self.facts
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(file.path.clone(), facts.clone());
        facts
    }

    fn absolute(&self, file: &SourceFile, module: &str) -> String {
        absolute_module(module, &file.module_path, file.path.ends_with("__init__.py"))
    }

    /// Chunk defining `member` at module level in `module`, following
    /// re-exports for a few hops.
    fn find_definition(&self, module: &str, member: &str, hops: usize) -> Option<ChunkId> {
        let file = self.corpus.file_for_module(module)?;
        let facts = self.facts(file);
        let analysis = facts.analysis.as_ref()?;
        let bindings = analysis.module_bindings().get(member)?;
        let local = bindings
            .iter()
            .find(|b| b.1 == BindingKind::Definition)
            .or_else(|| bindings.iter().find(|b| b.1 == BindingKind::Assignment));
        if let Some((line, _)) = local {
            return self.corpus.chunk_at(&file.path, *line).map(|c| c.id.clone());
        }
        if hops == 0 {
            return None;
        }
        let import = facts.imports.iter().find(|i| i.bound == member)?;
        let target = self.absolute(file, &import.module);
        match &import.member {
            Some(m) => self.find_definition(&target, m, hops - 1),
            None => None,
        }
    }

    /// Module a bound import name refers to, when it names a module rather than a member.
    fn module_of_binding(&self, file: &SourceFile, import: &ImportBinding) -> Option<String> {
        let base = self.absolute(file, &import.module);
        match &import.member {
            None if import.bound != import.module.split('.').next().unwrap_or("") => Some(base),
            None => Some(import.bound.clone()),
            Some(m) => {
                let sub = if base.is_empty() { m.clone() } else { format!("{base}.{m}") };
                self.corpus.file_for_module(&sub).map(|_| sub)
            }
        }
    }

    fn direct(&self, chunk: &CodeChunk) -> Direct {
        let mut out = Direct {
            modules: BTreeSet::new(),
            symbols: BTreeSet::new(),
            targets: BTreeSet::new(),
            degraded: false,
        };
        let Some(file) = self.corpus.file(&chunk.file_path) else {
            out.degraded = true;
            out.modules = text_imports(&chunk.text);
            return out;
        };
        let facts = self.facts(file);
        let Some(analysis) = facts.analysis.as_ref().filter(|_| facts.parsed) else {
            out.degraded = true;
            out.modules = text_imports(&chunk.text);
            return out;
        };
        let span = chunk.span;
        let mut used_imports: BTreeSet<usize> = BTreeSet::new();

        for load in analysis.loads.iter().filter(|l| span.contains_line(l.line)) {
            match &load.resolution {
                Resolution::Module(lines) => {
                    if lines.iter().any(|&l| span.contains_line(l)) {
                        continue;
                    }
                    let bindings = &analysis.module_bindings()[&load.name];
                    let local = bindings
                        .iter()
                        .find(|b| b.1 == BindingKind::Definition)
                        .or_else(|| bindings.iter().find(|b| b.1 == BindingKind::Assignment));
                    if let Some((line, _)) = local {
                        let target = self.corpus.chunk_at(&file.path, *line).map(|c| c.id.clone());
                        if let Some(t) = &target {
                            out.targets.insert(t.clone());
                        }
                        out.symbols.insert(ReferencedSymbol {
                            name: load.name.clone(),
                            defined_in: target,
                        });
                        continue;
                    }
                    let Some((idx, import)) =
                        facts.imports.iter().enumerate().find(|(_, i)| i.bound == load.name)
                    else {
                        continue;
                    };
                    used_imports.insert(idx);
                    let target = import
                        .member
                        .as_ref()
                        .and_then(|m| self.find_definition(&self.absolute(file, &import.module), m, 3));
                    if let Some(t) = &target {
                        out.targets.insert(t.clone());
                    }
                    // Bare module references are resolved through their attributes below.
                    if target.is_some() || self.module_of_binding(file, import).is_none() {
                        out.symbols.insert(ReferencedSymbol {
                            name: load.name.clone(),
                            defined_in: target,
                        });
                    }
                }
                Resolution::Unresolved => {
                    out.symbols.insert(ReferencedSymbol {
                        name: load.name.clone(),
                        defined_in: None,
                    });
                }
                Resolution::Builtin | Resolution::Local => {}
            }
        }

        for attr in analysis.attributes.iter().filter(|a| span.contains_line(a.line)) {
            let Some(import) = facts.imports.iter().find(|i| i.bound == attr.object) else {
                continue;
            };
            let shadowed = analysis.loads.iter().any(|l| {
                l.line == attr.line && l.name == attr.object && !matches!(l.resolution, Resolution::Module(_))
            });
            if shadowed {
                continue;
            }
            let Some(module) = self.module_of_binding(file, import) else {
                continue;
            };
            let target = self.find_definition(&module, &attr.attribute, 3);
            if let Some(t) = &target {
                out.targets.insert(t.clone());
            }
            out.symbols.insert(ReferencedSymbol {
                name: format!("{}.{}", attr.object, attr.attribute),
                defined_in: target,
            });
        }

        for (idx, import) in facts.imports.iter().enumerate() {
            if used_imports.contains(&idx) || span.contains_line(import.line) {
                out.modules.insert(self.absolute(file, &import.module));
            }
        }
        out.targets.remove(&chunk.id);
        out
    }

    pub fn resolve(&self, root: &CodeChunk) -> DependencyClosure {
        let first = self.direct(root);
        let mut closure = DependencyClosure {
            root: root.id.clone(),
            imported_modules: first.modules.into_iter().collect(),
            referenced_symbols: first.symbols.into_iter().collect(),
            pulled_chunks: Vec::new(),
            degraded: first.degraded,
        };
        let mut visited: BTreeSet<ChunkId> = BTreeSet::from([root.id.clone()]);
        let mut queue: VecDeque<(ChunkId, BTreeSet<ChunkId>, usize)> = VecDeque::new();
        queue.push_back((root.id.clone(), first.targets, 0));
        while let Some((parent, targets, depth)) = queue.pop_front() {
            if depth >= self.max_depth {
                continue;
            }
            for target in targets {
                if !visited.insert(target.clone()) {
                    continue;
                }
                let Some(chunk) = self.corpus.chunk(&target) else {
                    continue;
                };
                let next = if depth + 1 < self.max_depth {
                    self.direct(chunk).targets
                } else {
                    BTreeSet::new()
                };
                closure.pulled_chunks.push(PulledChunk {
                    chunk: chunk.clone(),
                    depth: depth + 1,
                    pulled_for: parent.clone(),
                });
                queue.push_back((target, next, depth + 1));
            }
        }
        closure
    }
}
