//! Static analysis of candidate scripts.
//!
//! The configured external linter must speak pylint's JSON output format.
//! When it is missing or crashes, a built-in scope walk covers undefined
//! names, imports outside the allowlist and arity of script-local functions.

use std::collections::BTreeSet;
use std::io::ErrorKind;
use std::process::Command;

use serde::{Deserialize, Serialize};
use tree_sitter::Node;

use crate::grammar::Grammar;
use crate::pyast::{self, Resolution, ScopeAnalysis};

pub const STDLIB_MODULES: &str = include_str!("../../data/stdlib_modules.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingClass {
    UndefinedName,
    UnresolvedImport,
    InvalidCallArity,
    /// Anything else; reported as a note, never blocking.
    Style,
}

impl FindingClass {
    pub fn as_str(self) -> &'static str {
        match self {
            FindingClass::UndefinedName => "undefined name",
            FindingClass::UnresolvedImport => "unresolved import",
            FindingClass::InvalidCallArity => "invalid call arity",
            FindingClass::Style => "style",
        }
    }

    pub fn blocking(self) -> bool {
        self != FindingClass::Style
    }

    fn from_pylint_symbol(symbol: &str) -> Self {
        match symbol {
            "undefined-variable" | "used-before-assignment" | "undefined-all-variable" => FindingClass::UndefinedName,
            "import-error" | "no-name-in-module" => FindingClass::UnresolvedImport,
            "too-many-function-args" | "no-value-for-parameter" | "unexpected-keyword-arg" => {
                FindingClass::InvalidCallArity
            }
            _ => FindingClass::Style,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub class: FindingClass,
    pub symbol: String,
    pub message: String,
    pub line: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticReport {
    pub analyzer: String,
    pub findings: Vec<Finding>,
    /// Why the built-in checker ran instead of the external one.
    pub fallback_reason: Option<String>,
}

impl StaticReport {
    pub fn blocking(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.class.blocking())
    }
}

#[derive(Debug, Deserialize)]
struct PylintMessage {
    symbol: String,
    message: String,
    #[serde(default)]
    line: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct StaticAnalyzer {
    /// Command line of the external linter; `{file}` is replaced by the
    /// script path, or the path is appended when absent. Empty means
    /// built-in only.
    pub command: Vec<String>,
    /// Top-level modules a script may import.
    pub allowlist: BTreeSet<String>,
    pub grammar: Grammar,
}

impl StaticAnalyzer {
    pub fn default_command() -> Vec<String> {
        ["pylint", "--output-format=json", "--score=n", "{file}"].map(String::from).to_vec()
    }

    /// Allowlist of the standard library plus `extra` top-level modules.
    pub fn new(command: Vec<String>, extra: impl IntoIterator<Item = String>, grammar: Grammar) -> Self {
        let mut allowlist: BTreeSet<String> = STDLIB_MODULES.lines().map(str::to_string).collect();
        allowlist.extend(extra.into_iter().map(|m| top_level(&m).to_string()));
        Self {
            command,
            allowlist,
            grammar,
        }
    }

    pub fn analyze(&self, script: &str) -> StaticReport {
        if self.command.is_empty() {
            return self.builtin(script, None);
        }
        match self.external(script) {
            Ok(report) => report,
            Err(reason) => {
                tracing::debug!(%reason, "external linter unusable; using built-in checks");
                self.builtin(script, Some(reason))
            }
        }
    }

    fn external(&self, script: &str) -> Result<StaticReport, String> {
        let dir = tempfile::tempdir().map_err(|e| format!("analyzer crash: {e}"))?;
        let path = dir.path().join("candidate.py");
        std::fs::write(&path, script).map_err(|e| format!("analyzer crash: {e}"))?;
        let file = path.display().to_string();
        let mut args: Vec<String> = self.command.iter().map(|a| a.replace("{file}", &file)).collect();
        if !self.command.iter().any(|a| a.contains("{file}")) {
            args.push(file);
        }
        let output = match Command::new(&args[0]).args(&args[1..]).current_dir(dir.path()).output() {
            Ok(o) => o,
            Err(e) if e.kind() == ErrorKind::NotFound => return Err(format!("analyzer unavailable: `{}` not found", args[0])),
            Err(e) => return Err(format!("analyzer crash: {e}")),
        };
        let stdout = String::from_utf8_lossy(&output.stdout);
        let messages: Vec<PylintMessage> = serde_json::from_str(stdout.trim()).map_err(|e| {
            let stderr = String::from_utf8_lossy(&output.stderr);
            format!("analyzer crash: unreadable output ({e}); stderr: {}", stderr.trim())
        })?;
        let findings = messages
            .into_iter()
            .map(|m| Finding {
                class: FindingClass::from_pylint_symbol(&m.symbol),
                symbol: m.symbol,
                message: m.message,
                line: m.line,
            })
            .filter(|f| !(f.class == FindingClass::UnresolvedImport && self.import_allowed(&f.message)))
            .collect();
        Ok(StaticReport {
            analyzer: format!("external:{}", args[0]),
            findings,
            fallback_reason: None,
        })
    }

    /// Pylint flags packages missing from its own environment; allowlisted
    /// modules are expected to exist where the script runs.
    fn import_allowed(&self, message: &str) -> bool {
        let quoted = message.split('\'').nth(1).unwrap_or("");
        !quoted.is_empty() && self.allowlist.contains(top_level(quoted))
    }

    pub fn builtin(&self, script: &str, fallback_reason: Option<String>) -> StaticReport {
        let mut findings = Vec::new();
        let Some(tree) = self.grammar.parse(script) else {
            return StaticReport {
                analyzer: "builtin".into(),
                findings,
                fallback_reason,
            };
        };
        let root = tree.root_node();
        let scopes = ScopeAnalysis::analyze(root, script);
        if !scopes.star_import {
            let mut seen = BTreeSet::new();
            for load in scopes.undefined() {
                if seen.insert(&load.name) {
                    findings.push(Finding {
                        class: FindingClass::UndefinedName,
                        symbol: "undefined-variable".into(),
                        message: format!("undefined name `{}`", load.name),
                        line: Some(load.line),
                    });
                }
            }
        }
        for import in pyast::all_imports(root, script) {
            if import.module.starts_with('.') {
                findings.push(Finding {
                    class: FindingClass::UnresolvedImport,
                    symbol: "import-error".into(),
                    message: format!("relative import `{}` cannot resolve in a standalone script", import.module),
                    line: Some(import.line),
                });
            } else if !self.allowlist.contains(top_level(&import.module)) {
                findings.push(Finding {
                    class: FindingClass::UnresolvedImport,
                    symbol: "import-error".into(),
                    message: format!("unresolved import `{}`", import.module),
                    line: Some(import.line),
                });
            }
        }
        findings.extend(arity_findings(root, script, &scopes));
        findings.sort_by_key(|f| (f.line, f.class));
        findings.dedup();
        StaticReport {
            analyzer: "builtin".into(),
            findings,
            fallback_reason,
        }
    }
}

fn top_level(module: &str) -> &str {
    module.split('.').next().unwrap_or(module)
}

#[derive(Debug)]
struct Signature {
    line: usize,
    positional: Vec<String>,
    required: usize,
    keyword_only: Vec<String>,
    required_keyword_only: Vec<String>,
    var_args: bool,
    var_kwargs: bool,
}

fn signature_of(def: Node<'_>, src: &str) -> Option<Signature> {
    let params = def.child_by_field_name("parameters")?;
    let mut sig = Signature {
        line: pyast::start_line(def),
        positional: Vec::new(),
        required: 0,
        keyword_only: Vec::new(),
        required_keyword_only: Vec::new(),
        var_args: false,
        var_kwargs: false,
    };
    let mut after_star = false;
    for p in pyast::named_children(params) {
        let name_of = |n: Node<'_>| -> String {
            match n.kind() {
                "identifier" => pyast::text(n, src).to_string(),
                _ => n
                    .child_by_field_name("name")
                    .or_else(|| pyast::named_children(n).into_iter().find(|c| c.kind() == "identifier"))
                    .map(|c| pyast::text(c, src).to_string())
                    .unwrap_or_default(),
            }
        };
        match p.kind() {
            "identifier" | "typed_parameter" => {
                let name = name_of(p);
                if after_star {
                    sig.required_keyword_only.push(name.clone());
                    sig.keyword_only.push(name);
                } else {
                    sig.positional.push(name);
                    sig.required = sig.positional.len();
                }
            }
            "default_parameter" | "typed_default_parameter" => {
                let name = name_of(p);
                if after_star {
                    sig.keyword_only.push(name);
                } else {
                    sig.positional.push(name);
                }
            }
            "list_splat_pattern" => {
                sig.var_args = true;
                after_star = true;
            }
            "keyword_separator" => after_star = true,
            "dictionary_splat_pattern" => sig.var_kwargs = true,
            "positional_separator" => {}
            // Tuple parameters and anything unexpected: give up on this def.
            _ => return None,
        }
    }
    Some(sig)
}

/// Calls to module-level functions of the script whose arguments cannot
/// bind to the parameters.
fn arity_findings(root: Node<'_>, src: &str, scopes: &ScopeAnalysis) -> Vec<Finding> {
    let mut defs = std::collections::BTreeMap::new();
    for child in pyast::named_children(root) {
        let def = match child.kind() {
            "decorated_definition" => continue,
            "function_definition" => child,
            _ => continue,
        };
        let Some(name) = def.child_by_field_name("name") else { continue };
        if let Some(sig) = signature_of(def, src) {
            defs.insert(pyast::text(name, src).to_string(), sig);
        }
    }
    let mut out = Vec::new();
    for call in pyast::descendants(root).into_iter().filter(|n| n.kind() == "call") {
        let Some(func) = call.child_by_field_name("function").filter(|f| f.kind() == "identifier") else {
            continue;
        };
        let name = pyast::text(func, src);
        let Some(sig) = defs.get(name) else { continue };
        let line = pyast::start_line(func);
        // Only calls that resolve to that single module-level def.
        let resolves = scopes.loads.iter().any(|l| {
            l.name == name && l.line == line && matches!(&l.resolution, Resolution::Module(lines) if lines == &[sig.line])
        });
        if !resolves {
            continue;
        }
        let Some(args) = call.child_by_field_name("arguments").filter(|a| a.kind() == "argument_list") else {
            continue;
        };
        let mut positional = 0usize;
        let mut keywords = Vec::new();
        let mut splat = false;
        for a in pyast::named_children(args) {
            match a.kind() {
                "keyword_argument" => {
                    if let Some(k) = a.child_by_field_name("name") {
                        keywords.push(pyast::text(k, src).to_string());
                    }
                }
                "list_splat" | "dictionary_splat" => splat = true,
                "comment" => {}
                _ => positional += 1,
            }
        }
        if splat {
            continue;
        }
        let problem = if positional > sig.positional.len() && !sig.var_args {
            Some(format!(
                "`{name}` takes {} positional argument(s) but {positional} were given",
                sig.positional.len()
            ))
        } else if let Some(k) = keywords
            .iter()
            .find(|k| !sig.var_kwargs && !sig.positional.contains(k) && !sig.keyword_only.contains(k))
        {
            Some(format!("`{name}` got an unexpected keyword argument `{k}`"))
        } else {
            let bound_positional: BTreeSet<&String> =
                sig.positional.iter().take(positional).chain(keywords.iter()).collect();
            sig.positional[..sig.required]
                .iter()
                .chain(sig.required_keyword_only.iter())
                .find(|p| !bound_positional.contains(p))
                .map(|p| format!("`{name}` is missing a value for parameter `{p}`"))
        };
        if let Some(message) = problem {
            out.push(Finding {
                class: FindingClass::InvalidCallArity,
                symbol: "invalid-call".into(),
                message,
                line: Some(line),
            });
        }
    }
    out
}
