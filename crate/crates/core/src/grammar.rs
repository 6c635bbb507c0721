//! Subject-language grammar handle and syntax diagnostics.
//!
//! Only Python is wired up today. The handle wraps a tree-sitter language and
//! adds an indentation scanner, since tree-sitter recovers silently from
//! indentation faults that the reference interpreter rejects.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tree_sitter::{Node, Parser, Tree};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GrammarError {
    #[error("grammar `{0}` is not available (known grammars: python)")]
    Unavailable(String),
}

#[derive(Clone)]
pub struct Grammar {
    name: &'static str,
    language: tree_sitter::Language,
    extensions: &'static [&'static str],
}

impl fmt::Debug for Grammar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grammar").field("name", &self.name).finish()
    }
}

impl Grammar {
    pub fn python() -> Self {
        Self {
            name: "python",
            language: tree_sitter_python::LANGUAGE.into(),
            extensions: &["py"],
        }
    }

    pub fn by_name(name: &str) -> Result<Self, GrammarError> {
        match name.to_ascii_lowercase().as_str() {
            "python" | "py" => Ok(Self::python()),
            _ => Err(GrammarError::Unavailable(name.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    /// File extension used when persisting generated scripts.
    pub fn script_extension(&self) -> &'static str {
        self.extensions[0]
    }

    pub fn handles(&self, path: &Path) -> bool {
        path.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| self.extensions.contains(&e))
    }

    pub fn parse(&self, source: &str) -> Option<Tree> {
        let mut parser = Parser::new();
        parser.set_language(&self.language).ok()?;
        parser.parse(source, None)
    }

    /// Returns `true` when the source is free of syntax and indentation faults.
    pub fn parses_cleanly(&self, source: &str) -> bool {
        self.first_syntax_error(source).is_none()
    }

    /// Earliest syntax diagnostic, combining the tree-sitter error nodes with
    /// the indentation scan.
    pub fn first_syntax_error(&self, source: &str) -> Option<SyntaxDiagnostic> {
        let tree_error = match self.parse(source) {
            Some(tree) => first_error_node(tree.root_node()).map(|node| describe_error(node, source)),
            None => Some(SyntaxDiagnostic {
                line: 1,
                column: 1,
                message: "parser could not process the source".to_string(),
            }),
        };
        let indent_error = indentation_error(source);
        match (tree_error, indent_error) {
            (Some(a), Some(b)) => Some(if b.line < a.line { b } else { a }),
            (a, b) => a.or(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntaxDiagnostic {
    /// 1-based line.
    pub line: usize,
    /// 1-based column.
    pub column: usize,
    pub message: String,
}

impl fmt::Display for SyntaxDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}: {}", self.line, self.column, self.message)
    }
}

fn first_error_node(node: Node<'_>) -> Option<Node<'_>> {
    if node.is_error() || node.is_missing() {
        return Some(node);
    }
    if !node.has_error() {
        return None;
    }
    let mut cursor = node.walk();
    for child in node.children(&mut cursor) {
        if let Some(found) = first_error_node(child) {
            return Some(found);
        }
    }
    None
}

fn describe_error(node: Node<'_>, source: &str) -> SyntaxDiagnostic {
    let pos = node.start_position();
    let message = if node.is_missing() {
        format!("missing `{}`", node.kind())
    } else {
        let text = &source[node.byte_range()];
        let snippet: String = text.lines().next().unwrap_or("").chars().take(40).collect();
        format!("invalid syntax near `{}`", snippet.trim())
    };
    SyntaxDiagnostic {
        line: pos.row + 1,
        column: pos.column + 1,
        message,
    }
}

#[derive(Clone, Copy)]
struct OpenString {
    quote: char,
    triple: bool,
}

/// Scans logical lines and applies the interpreter's INDENT/DEDENT rules.
pub(crate) fn indentation_error(source: &str) -> Option<SyntaxDiagnostic> {
    let mut stack: Vec<usize> = vec![0];
    let mut depth: usize = 0;
    let mut string: Option<OpenString> = None;
    let mut backslash = false;
    let mut expect_indent: Option<usize> = None;
    let mut last_sig: Option<char> = None;
    let mut logical_start = 0;
    let mut line_count = 0;

    for (idx, raw) in source.split('\n').enumerate() {
        let lineno = idx + 1;
        line_count = lineno;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        let continuation = depth > 0 || string.is_some() || backslash;
        backslash = false;

        if !continuation {
            let body = line.trim_start_matches([' ', '\t', '\x0c']);
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let indent = indent_width(&line[..line.len() - body.len()]);
            let top = *stack.last().unwrap_or(&0);
            if let Some(opener) = expect_indent.take() {
                if indent <= top {
                    return Some(SyntaxDiagnostic {
                        line: lineno,
                        column: 1,
                        message: format!("expected an indented block after line {opener}"),
                    });
                }
                stack.push(indent);
            } else if indent > top {
                return Some(SyntaxDiagnostic {
                    line: lineno,
                    column: 1,
                    message: "unexpected indent".to_string(),
                });
            } else if indent < top {
                while stack.last().is_some_and(|&t| t > indent) {
                    stack.pop();
                }
                if stack.last() != Some(&indent) {
                    return Some(SyntaxDiagnostic {
                        line: lineno,
                        column: 1,
                        message: "unindent does not match any outer indentation level".to_string(),
                    });
                }
            }
            last_sig = None;
            logical_start = lineno;
        }

        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if let Some(open) = string {
                if c == '\\' {
                    i += 2;
                    continue;
                }
                if c == open.quote {
                    if !open.triple {
                        string = None;
                        last_sig = Some(c);
                    } else if chars.get(i + 1) == Some(&open.quote) && chars.get(i + 2) == Some(&open.quote) {
                        string = None;
                        last_sig = Some(c);
                        i += 3;
                        continue;
                    }
                }
                i += 1;
                continue;
            }
            match c {
                '#' => break,
                '"' | '\'' => {
                    let triple = chars.get(i + 1) == Some(&c) && chars.get(i + 2) == Some(&c);
                    string = Some(OpenString { quote: c, triple });
                    i += if triple { 3 } else { 1 };
                    continue;
                }
                '(' | '[' | '{' => depth += 1,
                ')' | ']' | '}' => depth = depth.saturating_sub(1),
                '\\' if i + 1 == chars.len() => {
                    backslash = true;
                    i += 1;
                    continue;
                }
                _ => {}
            }
            if !c.is_whitespace() {
                last_sig = Some(c);
            }
            i += 1;
        }
        if string.is_some_and(|s| !s.triple) {
            // Unterminated single-line string; tree-sitter reports it.
            string = None;
        }
        if depth == 0 && string.is_none() && !backslash && last_sig == Some(':') {
            expect_indent = Some(logical_start);
        }
    }

    expect_indent.map(|opener| SyntaxDiagnostic {
        line: line_count + 1,
        column: 1,
        message: format!("expected an indented block after line {opener}"),
    })
}

fn indent_width(prefix: &str) -> usize {
    prefix.chars().fold(0, |w, c| match c {
        '\t' => (w / 8 + 1) * 8,
        _ => w + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_grammar_is_named() {
        let err = Grammar::by_name("cobol").unwrap_err();
        assert!(err.to_string().contains("cobol"));
    }

    #[test]
    fn clean_source_passes() {
        let g = Grammar::python();
        let src = "import os\n\nclass A:\n    def m(self, x):\n        return {'a': x,\n                'b': 2}\n\nif True: print(1)\n";
        assert_eq!(g.first_syntax_error(src), None);
    }

    #[test]
    fn unexpected_indent_reported() {
        let src = "def f(x):\n    y = x\n      z = y\n    return z\n";
        let d = indentation_error(src).unwrap();
        assert_eq!(d.line, 3);
        assert!(d.message.contains("unexpected indent"));
    }

    #[test]
    fn missing_block_reported_on_body_line() {
        let d = indentation_error("def f():\nreturn 1\n").unwrap();
        assert_eq!(d.line, 2);
    }

    #[test]
    fn strings_and_brackets_do_not_confuse_scanner() {
        let src = "x = '''\n  not: code\n'''\ny = [1,\n       2]\nz = \"a:\" # c:\nw = 1 + \\\n    2\n";
        assert_eq!(indentation_error(src), None);
    }

    #[test]
    fn unbalanced_bracket_has_line() {
        let g = Grammar::python();
        let d = g.first_syntax_error("a = 1\nb = (2,\n\nc = 3\n").unwrap();
        assert_eq!(d.line, 2);
    }
}
