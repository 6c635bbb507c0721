//! Training-loop detection by eight syntactic heuristics.
//!
//! | id | pattern |
//! |----|---------|
//! | H1 | high-level fit call: `.fit(`, `.fit_generator(`, `.train_on_batch(` |
//! | H2 | optimizer step: `.step(`, `.apply_gradients(`, `.minimize(` |
//! | H3 | gradient reset: `zero_grad`, `reset_states`, `reset_metrics`, `clear_grad` |
//! | H4 | backward call: `.backward(` |
//! | H5 | `with` scope over a gradient tape |
//! | H6 | epoch/batch/step loop whose body references a loss |
//! | H7 | loss assigned from a call (or to a `*loss*` name) and consumed later |
//! | H8 | loop over a loader/dataset whose body calls a model |
//!
//! A hit inside a loop claims the outermost loop of the chunk; otherwise it
//! claims the innermost enclosing function, or its own top-level statement.
//! Regions nested in another region are merged into it.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tree_sitter::Node;

use super::ModuleGroup;
use crate::corpus::{ChunkId, CodeChunk, LineSpan};
use crate::gateway::CrossScorer;
use crate::grammar::Grammar;
use crate::pyast::{descendants, end_line, start_line, text};
use crate::retrieval::QueryBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Heuristic {
    H1,
    H2,
    H3,
    H4,
    H5,
    H6,
    H7,
    H8,
}

impl Heuristic {
    pub const ALL: [Heuristic; 8] = [
        Heuristic::H1,
        Heuristic::H2,
        Heuristic::H3,
        Heuristic::H4,
        Heuristic::H5,
        Heuristic::H6,
        Heuristic::H7,
        Heuristic::H8,
    ];
}

impl std::fmt::Display for Heuristic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopComponents {
    pub forward_pass: bool,
    pub backward_pass: bool,
    pub gradient_step: bool,
    pub loss_computation: bool,
    pub data_loader: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLoop {
    pub chunk_ref: ChunkId,
    pub file_path: String,
    pub span: LineSpan,
    pub matched_heuristics: BTreeSet<Heuristic>,
    pub components: LoopComponents,
    pub relevance: f64,
    pub text: String,
    /// Chosen by heuristic count because every scorer call failed.
    pub scorer_fallback: bool,
}

const FIT: &[&str] = &["fit", "fit_generator", "train_on_batch"];
const STEP: &[&str] = &["step", "apply_gradients", "minimize"];
const RESET: &[&str] = &["zero_grad", "reset_states", "reset_metrics", "clear_grad", "clear_gradients"];
const LOOP_WORDS: &[&str] = &["epoch", "batch", "step", "iter", "range", "loader", "data"];
const LOADER_WORDS: &[&str] = &["loader", "dataset"];

fn callee_name<'s>(call: Node<'_>, src: &'s str) -> Option<&'s str> {
    let f = call.child_by_field_name("function")?;
    match f.kind() {
        "attribute" => f.child_by_field_name("attribute").map(|a| text(a, src)),
        "identifier" => Some(text(f, src)),
        _ => None,
    }
}

fn is_loss_name(name: &str) -> bool {
    name.to_ascii_lowercase().contains("loss")
}

fn is_model_name(name: &str) -> bool {
    let n = name.to_ascii_lowercase();
    n.contains("model") || n.contains("net") || n == "forward"
}

fn is_loop(n: Node<'_>) -> bool {
    matches!(n.kind(), "for_statement" | "while_statement")
}

fn loop_header(n: Node<'_>, src: &str) -> String {
    let parts: Vec<&str> = match n.kind() {
        "for_statement" => ["left", "right"]
            .iter()
            .filter_map(|f| n.child_by_field_name(f).map(|c| text(c, src)))
            .collect(),
        _ => n.child_by_field_name("condition").map(|c| text(c, src)).into_iter().collect(),
    };
    parts.join(" ").to_ascii_lowercase()
}

fn body_mentions_loss(n: Node<'_>, src: &str) -> bool {
    let Some(body) = n.child_by_field_name("body") else {
        return false;
    };
    descendants(body)
        .into_iter()
        .any(|d| d.kind() == "identifier" && is_loss_name(text(d, src)))
}

fn body_calls_model(n: Node<'_>, src: &str) -> bool {
    let Some(body) = n.child_by_field_name("body") else {
        return false;
    };
    descendants(body)
        .into_iter()
        .any(|d| d.kind() == "call" && callee_name(d, src).is_some_and(is_model_name))
}

/// Loss assignments whose target is read again later in the chunk.
fn loss_assignments<'t>(root: Node<'t>, src: &str) -> Vec<Node<'t>> {
    let all = descendants(root);
    let mut out = Vec::new();
    for node in &all {
        if node.kind() != "assignment" {
            continue;
        }
        let (Some(left), Some(right)) = (node.child_by_field_name("left"), node.child_by_field_name("right")) else {
            continue;
        };
        if left.kind() != "identifier" {
            continue;
        }
        let target = text(left, src);
        let loss_call = right.kind() == "call" && callee_name(right, src).is_some_and(is_loss_name);
        let loss_target = is_loss_name(target) && right.kind() == "call";
        if !(loss_call || loss_target) {
            continue;
        }
        let consumed = all.iter().any(|d| {
            d.kind() == "identifier" && text(*d, src) == target && d.start_byte() >= node.end_byte()
        });
        if consumed {
            out.push(*node);
        }
    }
    out
}

fn ancestors(node: Node<'_>) -> Vec<Node<'_>> {
    let mut out = Vec::new();
    let mut cur = node.parent();
    while let Some(n) = cur {
        out.push(n);
        cur = n.parent();
    }
    out
}

/// Region a hit belongs to: outermost loop, else innermost function, else
/// the top-level statement.
fn region_of(node: Node<'_>) -> Node<'_> {
    let chain: Vec<Node<'_>> = std::iter::once(node).chain(ancestors(node)).collect();
    if let Some(outer) = chain.iter().rev().find(|n| is_loop(**n)) {
        return *outer;
    }
    if let Some(func) = chain.iter().find(|n| n.kind() == "function_definition") {
        return *func;
    }
    chain
        .iter()
        .rev()
        .nth(1)
        .copied()
        .unwrap_or(node)
}

/// Removes the common leading indentation so method chunks parse standalone.
fn dedent(source: &str) -> String {
    let indent = source
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.len() - l.trim_start().len())
        .min()
        .unwrap_or(0);
    source
        .split_inclusive('\n')
        .map(|l| match l.get(..indent) {
            Some(prefix) if prefix.trim().is_empty() => &l[indent..],
            _ if l.ends_with('\n') => "\n",
            _ => "",
        })
        .collect()
}

/// Every heuristic region in one chunk.
pub fn detect_in_chunk(chunk: &CodeChunk, grammar: &Grammar) -> Vec<TrainingLoop> {
    if chunk.degraded {
        return Vec::new();
    }
    let src = dedent(&chunk.text);
    let Some(tree) = grammar.parse(&src) else {
        return Vec::new();
    };
    let root = tree.root_node();
    let src = src.as_str();

    let mut hits: Vec<(Node<'_>, Heuristic)> = Vec::new();
    for node in descendants(root) {
        match node.kind() {
            "call" => {
                let Some(name) = callee_name(node, src) else { continue };
                let is_attr = node.child_by_field_name("function").is_some_and(|f| f.kind() == "attribute");
                if is_attr && FIT.contains(&name) {
                    hits.push((node, Heuristic::H1));
                }
                if is_attr && STEP.contains(&name) {
                    hits.push((node, Heuristic::H2));
                }
                if RESET.contains(&name) {
                    hits.push((node, Heuristic::H3));
                }
                if is_attr && name == "backward" {
                    hits.push((node, Heuristic::H4));
                }
            }
            "with_statement" => {
                let tape = descendants(node)
                    .into_iter()
                    .filter(|d| d.kind() == "with_item")
                    .any(|d| text(d, src).contains("GradientTape"));
                if tape {
                    hits.push((node, Heuristic::H5));
                }
            }
            "for_statement" | "while_statement" => {
                let header = loop_header(node, src);
                if LOOP_WORDS.iter().any(|w| header.contains(w)) && body_mentions_loss(node, src) {
                    hits.push((node, Heuristic::H6));
                }
                if node.kind() == "for_statement" {
                    let iterable = node
                        .child_by_field_name("right")
                        .map(|r| text(r, src).to_ascii_lowercase())
                        .unwrap_or_default();
                    if LOADER_WORDS.iter().any(|w| iterable.contains(w)) && body_calls_model(node, src) {
                        hits.push((node, Heuristic::H8));
                    }
                }
            }
            _ => {}
        }
    }
    for a in loss_assignments(root, src) {
        hits.push((a, Heuristic::H7));
    }
    if hits.is_empty() {
        return Vec::new();
    }

    // Group hits by region, then fold nested regions into their containers.
    let mut regions: BTreeMap<(usize, usize), (Node<'_>, BTreeSet<Heuristic>)> = BTreeMap::new();
    for (node, h) in &hits {
        let r = region_of(*node);
        regions
            .entry((r.start_byte(), r.end_byte()))
            .or_insert_with(|| (r, BTreeSet::new()))
            .1
            .insert(*h);
    }
    let keys: Vec<(usize, usize)> = regions.keys().copied().collect();
    let mut merged: BTreeMap<(usize, usize), (Node<'_>, BTreeSet<Heuristic>)> = BTreeMap::new();
    for key in &keys {
        let outer = keys
            .iter()
            .filter(|o| o.0 <= key.0 && key.1 <= o.1)
            .min_by_key(|o| (o.0, std::cmp::Reverse(o.1)))
            .copied()
            .unwrap_or(*key);
        let hs = regions[key].1.clone();
        merged
            .entry(outer)
            .or_insert_with(|| (regions[&outer].0, BTreeSet::new()))
            .1
            .extend(hs);
    }

    let offset = chunk.span.start - 1;
    let lines: Vec<&str> = chunk.text.split_inclusive('\n').collect();
    merged
        .into_values()
        .map(|(node, heuristics)| {
            let (s, e) = (start_line(node), end_line(node));
            let components = components_of(node, src, &heuristics);
            TrainingLoop {
                chunk_ref: chunk.id.clone(),
                file_path: chunk.file_path.clone(),
                span: LineSpan::new(s + offset, e + offset),
                matched_heuristics: heuristics,
                components,
                relevance: 0.0,
                text: lines[s - 1..e.min(lines.len())].concat(),
                scorer_fallback: false,
            }
        })
        .collect()
}

fn components_of(region: Node<'_>, src: &str, hs: &BTreeSet<Heuristic>) -> LoopComponents {
    let nodes = descendants(region);
    let model_call = nodes
        .iter()
        .any(|d| d.kind() == "call" && callee_name(*d, src).is_some_and(is_model_name));
    let loss_call = nodes
        .iter()
        .any(|d| d.kind() == "call" && callee_name(*d, src).is_some_and(is_loss_name));
    let loader = nodes
        .iter()
        .filter(|d| d.kind() == "for_statement")
        .filter_map(|d| d.child_by_field_name("right"))
        .any(|r| {
            let t = text(r, src).to_ascii_lowercase();
            LOADER_WORDS.iter().any(|w| t.contains(w)) || t.contains("batch")
        });
    let fit = hs.contains(&Heuristic::H1);
    LoopComponents {
        forward_pass: fit || model_call || hs.contains(&Heuristic::H8),
        backward_pass: fit || hs.contains(&Heuristic::H4) || hs.contains(&Heuristic::H5),
        gradient_step: fit || hs.contains(&Heuristic::H2),
        loss_computation: fit || loss_call || hs.contains(&Heuristic::H6) || hs.contains(&Heuristic::H7),
        data_loader: hs.contains(&Heuristic::H8) || loader,
    }
}

pub fn extract_training_loops(group: &ModuleGroup, grammar: &Grammar) -> Vec<TrainingLoop> {
    group
        .members
        .iter()
        .flat_map(|s| detect_in_chunk(&s.chunk, grammar))
        .collect()
}

/// Picks the single loop most relevant to the report.
pub fn rank_loops(loops: Vec<TrainingLoop>, query: &QueryBundle, scorer: &dyn CrossScorer) -> Option<TrainingLoop> {
    if loops.is_empty() {
        return None;
    }
    let scores: Vec<Option<f64>> = loops
        .par_iter()
        .map(|l| scorer.cross_score(&query.raw_text, &l.text).ok().map(|s| s.clamp(0.0, 1.0)))
        .collect();
    if scores.iter().all(Option::is_none) {
        tracing::warn!("loop scorer failed on every candidate; falling back to heuristic count");
        let mut best = loops
            .into_iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.matched_heuristics
                    .len()
                    .cmp(&b.matched_heuristics.len())
                    .then_with(|| ib.cmp(ia))
            })
            .map(|(_, l)| l)?;
        best.scorer_fallback = true;
        return Some(best);
    }
    loops
        .into_iter()
        .zip(scores)
        .enumerate()
        .filter_map(|(i, (mut l, s))| {
            let s = s?;
            l.relevance = s;
            Some((i, l))
        })
        .max_by(|(ia, a), (ib, b)| a.relevance.total_cmp(&b.relevance).then_with(|| ib.cmp(ia)))
        .map(|(_, l)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ChunkConfig, Corpus};
    use crate::gateway::GatewayError;

    fn chunk_of(text: &str) -> CodeChunk {
        let corpus =
            Corpus::from_sources(vec![("t.py".into(), text.into())], &Grammar::python(), &ChunkConfig::default()).unwrap();
        assert_eq!(corpus.len(), 1, "fixture should be one chunk");
        corpus.chunks[0].clone()
    }

    fn heuristics(text: &str) -> Vec<Vec<Heuristic>> {
        let corpus =
            Corpus::from_sources(vec![("t.py".into(), text.into())], &Grammar::python(), &ChunkConfig::default()).unwrap();
        corpus
            .chunks
            .iter()
            .flat_map(|c| detect_in_chunk(c, &Grammar::python()))
            .map(|l| l.matched_heuristics.into_iter().collect())
            .collect()
    }

    #[test]
    fn torch_loop_matches_step_reset_backward_epoch() {
        let src = "def train(model, opt, data):\n    for epoch in range(3):\n        opt.zero_grad()\n        loss.backward()\n        opt.step()\n";
        let loops = detect_in_chunk(&chunk_of(src), &Grammar::python());
        assert_eq!(loops.len(), 1);
        let l = &loops[0];
        assert_eq!(
            l.matched_heuristics.iter().copied().collect::<Vec<_>>(),
            vec![Heuristic::H2, Heuristic::H3, Heuristic::H4, Heuristic::H6]
        );
        assert!(l.components.backward_pass && l.components.gradient_step);
        assert_eq!(l.span, LineSpan::new(2, 5));
        assert!(l.text.starts_with("    for epoch"));
    }

    #[test]
    fn model_definition_has_no_loop() {
        assert!(heuristics("class Net:\n    def __init__(self):\n        self.w = 1\n").is_empty());
    }

    #[test]
    fn keras_fit_is_h1() {
        assert_eq!(heuristics("model.fit(x, y)\n"), vec![vec![Heuristic::H1]]);
    }

    #[test]
    fn method_chunk_is_dedented() {
        let src = "class T:\n    def run(self):\n        for batch in self.loader:\n            out = self.model(batch)\n";
        let corpus =
            Corpus::from_sources(vec![("t.py".into(), src.into())], &Grammar::python(), &ChunkConfig::default()).unwrap();
        let method = corpus.chunks.iter().find(|c| c.span.start == 2).unwrap();
        let loops = detect_in_chunk(method, &Grammar::python());
        assert_eq!(loops.len(), 1);
        assert_eq!(loops[0].matched_heuristics, BTreeSet::from([Heuristic::H8]));
        assert_eq!(loops[0].span, LineSpan::new(3, 4));
    }

    struct Fixed(Vec<Result<f64, ()>>);

    impl CrossScorer for Fixed {
        fn cross_score(&self, _q: &str, doc: &str) -> Result<f64, GatewayError> {
            let idx: usize = doc.trim().parse().unwrap();
            self.0[idx].map_err(|_| GatewayError::Log("x".into()))
        }
    }

    fn lp(idx: usize, n_heuristics: usize) -> TrainingLoop {
        TrainingLoop {
            chunk_ref: ChunkId(format!("c{idx}")),
            file_path: "t.py".into(),
            span: LineSpan::new(1, 1),
            matched_heuristics: Heuristic::ALL.iter().take(n_heuristics).copied().collect(),
            components: LoopComponents::default(),
            relevance: 0.0,
            text: idx.to_string(),
            scorer_fallback: false,
        }
    }

    #[test]
    fn ranking_takes_max_or_falls_back() {
        let q = QueryBundle::from_parts("q", &[1.0]).unwrap();
        assert!(rank_loops(vec![], &q, &Fixed(vec![])).is_none());
        let best = rank_loops(vec![lp(0, 1), lp(1, 1)], &q, &Fixed(vec![Ok(0.8), Ok(0.3)])).unwrap();
        assert_eq!(best.chunk_ref.as_str(), "c0");
        assert_eq!(best.relevance, 0.8);
        let fb = rank_loops(vec![lp(0, 1), lp(1, 3)], &q, &Fixed(vec![Err(()), Err(())])).unwrap();
        assert_eq!(fb.chunk_ref.as_str(), "c1");
        assert!(fb.scorer_fallback);
    }
}
