use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tree_sitter::Node;

use super::{resolve_module, ChunkId, ChunkKind, CodeChunk, IndexError, LineSpan};
use crate::grammar::Grammar;
use crate::pyast::{end_line, start_line};
use crate::tokenize::tokenize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkConfig {
    pub max_chunk_lines: usize,
    /// Window length for files that do not parse.
    pub fallback_window: usize,
    pub fallback_overlap: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self {
            max_chunk_lines: 120,
            fallback_window: 60,
            fallback_overlap: 10,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Piece {
    span: LineSpan,
    kind: ChunkKind,
}

/// Byte offsets of line starts, for slicing exact line ranges.
pub(crate) struct LineTable<'s> {
    source: &'s str,
    starts: Vec<usize>,
}

impl<'s> LineTable<'s> {
    pub(crate) fn new(source: &'s str) -> Self {
        let mut starts = vec![0];
        for (i, b) in source.bytes().enumerate() {
            if b == b'\n' && i + 1 < source.len() {
                starts.push(i + 1);
            }
        }
        Self { source, starts }
    }

    pub(crate) fn line_count(&self) -> usize {
        if self.source.is_empty() {
            0
        } else {
            self.starts.len()
        }
    }

    /// Text of the span including the trailing newline of its last line.
    pub(crate) fn slice(&self, span: LineSpan) -> &'s str {
        let from = self.starts[span.start - 1];
        let to = self.starts.get(span.end).copied().unwrap_or(self.source.len());
        &self.source[from..to]
    }
}

/// Splits one source file into chunks whose spans partition its lines.
///
/// Functions, methods and classes become their own chunks (a class yields a
/// header chunk plus one chunk per method); runs of other statements become
/// `top_level_block` chunks. Blank lines between chunks are absorbed into the
/// preceding chunk. Nodes longer than `max_chunk_lines` are cut at the latest
/// statement boundary that keeps the piece under the limit. A file that does
/// not parse is cut into overlapping line windows flagged as degraded.
pub fn chunk_file(
    path: &str,
    source: &str,
    grammar: &Grammar,
    config: &ChunkConfig,
) -> Result<Vec<CodeChunk>, IndexError> {
    if !grammar.handles(Path::new(path)) {
        return Err(IndexError::GrammarUnavailable {
            path: path.to_string(),
            grammar: grammar.name().to_string(),
        });
    }
    if source.trim().is_empty() {
        return Ok(Vec::new());
    }
    let lines = LineTable::new(source);
    let n_lines = lines.line_count();

    let parsed = grammar
        .parse(source)
        .filter(|tree| !tree.root_node().has_error() && grammar.first_syntax_error(source).is_none());
    let (pieces, degraded) = match parsed {
        Some(tree) => {
            let mut pieces = Vec::new();
            let root = tree.root_node();
            let children = named_children(root);
            segment_children(&children, false, ChunkKind::TopLevelBlock, None, &mut pieces, config);
            (close_gaps(pieces, n_lines), false)
        }
        None => (line_windows(n_lines, config), true),
    };

    let module_path = resolve_module(path);
    Ok(pieces
        .into_iter()
        .map(|piece| {
            let text = lines.slice(piece.span).to_string();
            let mut token_counts = BTreeMap::new();
            for token in tokenize(&text) {
                *token_counts.entry(token).or_insert(0u32) += 1;
            }
            CodeChunk {
                id: ChunkId::new(path, piece.span),
                file_path: path.to_string(),
                span: piece.span,
                kind: if degraded { ChunkKind::TopLevelBlock } else { piece.kind },
                text,
                module_path: module_path.clone(),
                token_counts,
                degraded,
            }
        })
        .collect())
}

fn named_children(node: Node<'_>) -> Vec<Node<'_>> {
    let mut cursor = node.walk();
    node.named_children(&mut cursor).collect()
}

/// The function or class wrapped by `node`, with a flag for classes.
fn definition_of(node: Node<'_>) -> Option<(Node<'_>, bool)> {
    match node.kind() {
        "function_definition" => Some((node, false)),
        "class_definition" => Some((node, true)),
        "decorated_definition" => node
            .child_by_field_name("definition")
            .map(|def| (def, def.kind() == "class_definition")),
        _ => None,
    }
}

fn segment_children<'t>(
    children: &[Node<'t>],
    in_class: bool,
    run_kind: ChunkKind,
    header: Option<(usize, usize)>,
    out: &mut Vec<Piece>,
    config: &ChunkConfig,
) {
    let mut run: Option<(usize, usize)> = header;
    let mut run_nodes: Vec<Node<'t>> = Vec::new();

    for &child in children {
        if let Some((def, is_class)) = definition_of(child) {
            if let Some((s, e)) = run.take() {
                emit_sized(s, e, &run_nodes, run_kind, out, config);
                run_nodes.clear();
            }
            if is_class {
                segment_class(child, def, out, config);
            } else {
                let kind = if in_class { ChunkKind::Method } else { ChunkKind::Function };
                emit_sized(start_line(child), end_line(child), &[child], kind, out, config);
            }
        } else {
            let (s, e) = (start_line(child), end_line(child));
            run = Some(match run {
                Some((rs, re)) => (rs.min(s), re.max(e)),
                None => (s, e),
            });
            run_nodes.push(child);
        }
    }
    if let Some((s, e)) = run {
        emit_sized(s, e, &run_nodes, run_kind, out, config);
    }
}

fn segment_class(outer: Node<'_>, class_node: Node<'_>, out: &mut Vec<Piece>, config: &ChunkConfig) {
    let (s, e) = (start_line(outer), end_line(outer));
    let Some(body) = class_node.child_by_field_name("body") else {
        emit_sized(s, e, &[outer], ChunkKind::Class, out, config);
        return;
    };
    let body_start = start_line(body);
    if body_start <= start_line(class_node) {
        emit_sized(s, e, &[outer], ChunkKind::Class, out, config);
        return;
    }
    let header = (s, body_start - 1);
    let children = named_children(body);
    segment_children(&children, true, ChunkKind::Class, Some(header), out, config);
}

/// Emits `[start, end]` as one piece, or cuts it at statement boundaries.
fn emit_sized(
    start: usize,
    end: usize,
    nodes: &[Node<'_>],
    kind: ChunkKind,
    out: &mut Vec<Piece>,
    config: &ChunkConfig,
) {
    let max = config.max_chunk_lines.max(1);
    if end + 1 - start <= max {
        out.push(Piece {
            span: LineSpan::new(start, end),
            kind,
        });
        return;
    }
    let mut boundaries = BTreeSet::new();
    for &node in nodes {
        boundaries.insert(start_line(node));
        collect_statement_starts(node, &mut boundaries);
    }
    let mut cursor = start;
    while cursor <= end {
        let limit = cursor + max;
        let cut = if limit > end {
            end + 1
        } else {
            boundaries
                .range(cursor + 1..=limit)
                .next_back()
                .copied()
                .unwrap_or(limit)
        };
        out.push(Piece {
            span: LineSpan::new(cursor, cut - 1),
            kind,
        });
        cursor = cut;
    }
}

fn collect_statement_starts(node: Node<'_>, into: &mut BTreeSet<usize>) {
    let mut cursor = node.walk();
    for child in node.named_children(&mut cursor) {
        if matches!(node.kind(), "block" | "module") {
            into.insert(start_line(child));
        }
        collect_statement_starts(child, into);
    }
}

fn close_gaps(mut pieces: Vec<Piece>, n_lines: usize) -> Vec<Piece> {
    pieces.sort_by_key(|p| p.span.start);
    let mut out: Vec<Piece> = Vec::with_capacity(pieces.len());
    for mut piece in pieces {
        if let Some(prev) = out.last_mut() {
            if piece.span.start > prev.span.end + 1 {
                prev.span.end = piece.span.start - 1;
            } else if piece.span.start <= prev.span.end {
                if piece.span.end <= prev.span.end {
                    continue;
                }
                piece.span.start = prev.span.end + 1;
            }
        } else if piece.span.start > 1 {
            piece.span.start = 1;
        }
        out.push(piece);
    }
    if let Some(last) = out.last_mut() {
        last.span.end = last.span.end.max(n_lines);
    }
    out
}

fn line_windows(n_lines: usize, config: &ChunkConfig) -> Vec<Piece> {
    let window = config.fallback_window.max(1);
    let step = window.saturating_sub(config.fallback_overlap).max(1);
    let mut out = Vec::new();
    let mut start = 1;
    loop {
        let end = (start + window - 1).min(n_lines);
        out.push(Piece {
            span: LineSpan::new(start, end),
            kind: ChunkKind::TopLevelBlock,
        });
        if end == n_lines {
            break;
        }
        start += step;
    }
    out
}
