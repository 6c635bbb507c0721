//! Module partitioning and context assembly.

mod loops;

pub use loops::{detect_in_chunk, extract_training_loops, rank_loops, Heuristic, LoopComponents, TrainingLoop};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ChunkId;
use crate::retrieval::{DependencyClosure, DependencyResolver, ScoredSnippet};

pub const DEFAULT_MAX_MODULES: usize = 5;
pub const MAX_SNIPPETS_PER_CONTEXT: usize = 5;
pub const DEFAULT_TOKEN_BUDGET: usize = 6000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleGroup {
    pub module_id: String,
    /// Members in descending priority.
    pub members: Vec<ScoredSnippet>,
    pub priority: f64,
}

fn by_priority(a: &ScoredSnippet, b: &ScoredSnippet) -> std::cmp::Ordering {
    b.priority()
        .total_cmp(&a.priority())
        .then_with(|| b.hybrid.total_cmp(&a.hybrid))
        .then_with(|| a.chunk.id.cmp(&b.chunk.id))
}

/// Groups snippets by source module and keeps the `max_modules` groups with
/// the highest member maximum.
pub fn partition_modules(snippets: &[ScoredSnippet], max_modules: usize) -> Vec<ModuleGroup> {
    let mut by_module: BTreeMap<&str, Vec<ScoredSnippet>> = BTreeMap::new();
    for s in snippets {
        by_module.entry(s.chunk.module_path.as_str()).or_default().push(s.clone());
    }
    let mut groups: Vec<ModuleGroup> = by_module
        .into_iter()
        .map(|(module, mut members)| {
            members.sort_by(by_priority);
            let priority = members.iter().map(ScoredSnippet::priority).fold(f64::NEG_INFINITY, f64::max);
            ModuleGroup {
                module_id: module.to_string(),
                members,
                priority,
            }
        })
        .collect();
    groups.sort_by(|a, b| b.priority.total_cmp(&a.priority).then_with(|| a.module_id.cmp(&b.module_id)));
    groups.truncate(max_modules);
    groups
}

/// Replacement for partitioning when it is disabled: consecutive runs of
/// `MAX_SNIPPETS_PER_CONTEXT` snippets in rank order.
pub fn batch_snippets(snippets: &[ScoredSnippet], max_groups: usize) -> Vec<ModuleGroup> {
    snippets
        .chunks(MAX_SNIPPETS_PER_CONTEXT)
        .take(max_groups)
        .enumerate()
        .map(|(i, batch)| ModuleGroup {
            module_id: format!("batch-{}", i + 1),
            members: batch.to_vec(),
            priority: batch.iter().map(ScoredSnippet::priority).fold(f64::NEG_INFINITY, f64::max),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproductionContext {
    pub rank: usize,
    pub module_id: String,
    pub priority: f64,
    pub training_loop: Option<TrainingLoop>,
    pub snippets: Vec<ScoredSnippet>,
    pub dependencies: DependencyClosure,
    pub rendered: String,
    pub token_budget_used: usize,
    /// Snippet whose text already contains the loop, so it is not repeated.
    pub loop_snippet: Option<ChunkId>,
    pub loop_truncated: bool,
    pub evicted: Vec<ChunkId>,
}

/// Approximate token count: whitespace words times 1.3, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    (text.split_whitespace().count() as f64 * 1.3).ceil() as usize
}

fn fence(out: &mut String, body: &str) {
    out.push_str("```python\n");
    out.push_str(body);
    if !body.ends_with('\n') {
        out.push('\n');
    }
    out.push_str("```\n\n");
}

struct Draft<'a> {
    rank: usize,
    module_id: &'a str,
    training_loop: Option<TrainingLoop>,
    snippets: Vec<ScoredSnippet>,
    closures: Vec<(ChunkId, DependencyClosure)>,
    loop_snippet: Option<ChunkId>,
    evicted_deps: BTreeSet<ChunkId>,
}

impl Draft<'_> {
    fn dependencies(&self) -> DependencyClosure {
        let root = self
            .snippets
            .first()
            .map(|s| s.chunk.id.clone())
            .or_else(|| self.training_loop.as_ref().map(|l| l.chunk_ref.clone()))
            .unwrap_or_else(|| ChunkId(self.module_id.to_string()));
        let mut exclude: BTreeSet<ChunkId> = self.snippets.iter().map(|s| s.chunk.id.clone()).collect();
        if let Some(l) = &self.training_loop {
            exclude.insert(l.chunk_ref.clone());
        }
        exclude.extend(self.evicted_deps.iter().cloned());
        let live: Vec<DependencyClosure> = self
            .closures
            .iter()
            .filter(|(owner, _)| {
                self.snippets.iter().any(|s| &s.chunk.id == owner)
                    || self.training_loop.as_ref().is_some_and(|l| &l.chunk_ref == owner)
            })
            .map(|(_, c)| c.clone())
            .collect();
        DependencyClosure::merge(root, &live, &exclude)
    }

    fn render(&self, deps: &DependencyClosure) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# Context {} (module {})\n", self.rank, self.module_id);
        if let Some(l) = &self.training_loop {
            if self.loop_snippet.is_none() {
                let hs: Vec<String> = l.matched_heuristics.iter().map(|h| h.to_string()).collect();
                let _ = writeln!(
                    out,
                    "## Training loop: {} lines {} [{}]",
                    l.file_path,
                    l.span,
                    hs.join(",")
                );
                fence(&mut out, &l.text);
            }
        }
        for (i, s) in self.snippets.iter().enumerate() {
            let marker = if self.loop_snippet.as_ref() == Some(&s.chunk.id) {
                " (contains the training loop)"
            } else {
                ""
            };
            let _ = writeln!(
                out,
                "## Snippet {}: {} lines {} ({}){}",
                i + 1,
                s.chunk.file_path,
                s.chunk.span,
                s.chunk.kind,
                marker
            );
            fence(&mut out, &s.chunk.text);
        }
        for p in &deps.pulled_chunks {
            let _ = writeln!(
                out,
                "## Dependency: {} lines {} (depth {}, needed by {})",
                p.chunk.file_path, p.chunk.span, p.depth, p.pulled_for
            );
            fence(&mut out, &p.chunk.text);
        }
        if !deps.imported_modules.is_empty() {
            let _ = writeln!(out, "## Imported modules\n{}", deps.imported_modules.join(", "));
        }
        out
    }
}

/// Keeps whole lines of `text` from the top while the estimate fits.
fn truncate_lines(text: &str, max_tokens: usize) -> String {
    let mut out = String::new();
    for line in text.split_inclusive('\n') {
        if estimate_tokens(&out) + estimate_tokens(line) > max_tokens {
            break;
        }
        out.push_str(line);
    }
    out
}

/// Builds one context per group. `loops[i]` is the selected loop of
/// `groups[i]`; `resolver` is `None` when dependency pull-in is disabled.
pub fn assemble_contexts(
    groups: &[ModuleGroup],
    loops: &[Option<TrainingLoop>],
    resolver: Option<&DependencyResolver<'_>>,
    budget: usize,
) -> Vec<ReproductionContext> {
    groups
        .par_iter()
        .enumerate()
        .map(|(i, group)| {
            let training_loop = loops.get(i).cloned().flatten();
            assemble_one(i + 1, group, training_loop, resolver, budget)
        })
        .collect()
}

fn assemble_one(
    rank: usize,
    group: &ModuleGroup,
    training_loop: Option<TrainingLoop>,
    resolver: Option<&DependencyResolver<'_>>,
    budget: usize,
) -> ReproductionContext {
    let snippets: Vec<ScoredSnippet> = group.members.iter().take(MAX_SNIPPETS_PER_CONTEXT).cloned().collect();
    let loop_snippet = training_loop.as_ref().and_then(|l| {
        snippets
            .iter()
            .find(|s| s.chunk.id == l.chunk_ref)
            .map(|s| s.chunk.id.clone())
    });
    let mut closures = Vec::new();
    if let Some(r) = resolver {
        for s in &snippets {
            closures.push((s.chunk.id.clone(), r.resolve(&s.chunk)));
        }
        if let (Some(l), None) = (&training_loop, &loop_snippet) {
            if let Some(owner) = group.members.iter().find(|m| m.chunk.id == l.chunk_ref) {
                closures.push((owner.chunk.id.clone(), r.resolve(&owner.chunk)));
            }
        }
    }
    let mut draft = Draft {
        rank,
        module_id: &group.module_id,
        training_loop,
        snippets,
        closures,
        loop_snippet,
        evicted_deps: BTreeSet::new(),
    };
    let mut evicted = Vec::new();

    loop {
        let deps = draft.dependencies();
        let used = estimate_tokens(&draft.render(&deps));
        if used <= budget {
            return finish(draft, group, false, evicted);
        }
        // 1. lowest-scored snippet that does not carry the loop
        let min_keep = usize::from(draft.training_loop.is_none());
        let evictable = draft
            .snippets
            .iter()
            .rposition(|s| draft.loop_snippet.as_ref() != Some(&s.chunk.id));
        if let Some(pos) = evictable.filter(|_| draft.snippets.len() > min_keep) {
            evicted.push(draft.snippets.remove(pos).chunk.id);
            continue;
        }
        // 2. deepest dependency
        if let Some(p) = deps
            .pulled_chunks
            .iter()
            .max_by(|a, b| a.depth.cmp(&b.depth).then_with(|| a.chunk.id.cmp(&b.chunk.id)))
        {
            draft.evicted_deps.insert(p.chunk.id.clone());
            evicted.push(p.chunk.id.clone());
            continue;
        }
        // 3. a loop-carrying snippet gives way to the bare loop
        if let Some(id) = draft.loop_snippet.take() {
            draft.snippets.retain(|s| s.chunk.id != id);
            evicted.push(id);
            continue;
        }
        // 4. cut the remaining piece at line boundaries
        let truncated = if let Some(l) = draft.training_loop.as_mut() {
            let room = budget.saturating_sub(used - estimate_tokens(&l.text));
            l.text = truncate_lines(&l.text, room);
            true
        } else {
            if let Some(s) = draft.snippets.first_mut() {
                let room = budget.saturating_sub(used - estimate_tokens(&s.chunk.text));
                s.chunk.text = truncate_lines(&s.chunk.text, room);
            }
            false
        };
        return finish(draft, group, truncated, evicted);
    }
}

fn finish(draft: Draft<'_>, group: &ModuleGroup, loop_truncated: bool, evicted: Vec<ChunkId>) -> ReproductionContext {
    let deps = draft.dependencies();
    let rendered = draft.render(&deps);
    ReproductionContext {
        rank: draft.rank,
        module_id: group.module_id.clone(),
        priority: group.priority,
        token_budget_used: estimate_tokens(&rendered),
        training_loop: draft.training_loop,
        snippets: draft.snippets,
        dependencies: deps,
        rendered,
        loop_snippet: draft.loop_snippet,
        loop_truncated,
        evicted,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::sparse::tests::chunk;

    fn snip(id: &str, module: &str, score: f64) -> ScoredSnippet {
        let mut c = chunk(id, &format!("text of {id}"));
        c.module_path = module.into();
        ScoredSnippet {
            chunk: c,
            bm25_raw: 0.0,
            bm25_norm: 0.0,
            angular: 0.0,
            hybrid: 0.0,
            cross_score: Some(score),
            unscored: false,
        }
    }

    #[test]
    fn single_strong_snippet_beats_many_weak() {
        let mut input = vec![snip("a1", "A", 0.9)];
        for i in 0..4 {
            input.push(snip(&format!("b{i}"), "B", 0.6));
        }
        let groups = partition_modules(&input, 5);
        assert_eq!(groups[0].module_id, "A");
        assert_eq!(groups[1].module_id, "B");
        assert_eq!(groups[1].priority, 0.6);
    }

    #[test]
    fn keeps_top_five_modules() {
        let scores = [0.1, 0.7, 0.3, 0.9, 0.5, 0.2, 0.8];
        let input: Vec<_> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| snip(&format!("c{i}"), &format!("m{i}"), s))
            .collect();
        let groups = partition_modules(&input, 5);
        let kept: Vec<_> = groups.iter().map(|g| g.module_id.as_str()).collect();
        assert_eq!(kept, ["m3", "m6", "m1", "m4", "m2"]);
    }

    #[test]
    fn renders_each_piece_once_and_evicts_lowest_first() {
        let members: Vec<_> = (0..3).map(|i| snip(&format!("s{i}"), "A", 0.9 - i as f64 * 0.1)).collect();
        let group = ModuleGroup {
            module_id: "A".into(),
            priority: 0.9,
            members,
        };
        let ctx = &assemble_contexts(std::slice::from_ref(&group), &[None], None, 10_000)[0];
        for i in 0..3 {
            assert_eq!(ctx.rendered.matches(&format!("text of s{i}\n")).count(), 1);
        }
        let tight = &assemble_contexts(&[group], &[None], None, 40)[0];
        assert!(tight.token_budget_used <= 40, "{}", tight.rendered);
        assert_eq!(tight.evicted.first().map(ChunkId::as_str), Some("s2"));
    }
}
