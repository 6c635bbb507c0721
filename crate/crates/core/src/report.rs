//! Bug reports and their four-section restructured form.

use std::fmt::Write as _;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{CompletionProvider, ModelRole};
use crate::prompts::{self, task};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("bug report body is empty")]
    EmptyBody,
    #[error("cannot read bug report {path}: {message}")]
    Unreadable { path: String, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceMeta {
    pub project: Option<String>,
    pub framework: Option<String>,
    pub url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BugReport {
    pub id: String,
    pub title: String,
    pub body: String,
    /// Contents of fenced code blocks, byte-exact substrings of `body`.
    #[serde(default)]
    pub attachments: Vec<String>,
    #[serde(default)]
    pub source_meta: SourceMeta,
}

#[derive(Deserialize)]
struct ReportFile {
    id: Option<String>,
    title: String,
    body: String,
    #[serde(default)]
    source_meta: SourceMeta,
}

pub fn code_blocks(body: &str) -> Vec<String> {
    let re = Regex::new(r"(?ms)^[ \t]*```[^\n]*\n(.*?)^[ \t]*```").expect("static regex");
    re.captures_iter(body).map(|c| c[1].to_string()).collect()
}

impl BugReport {
    pub fn new(id: impl Into<String>, title: impl Into<String>, body: impl Into<String>) -> Result<Self, ReportError> {
        let body = body.into();
        if body.trim().is_empty() {
            return Err(ReportError::EmptyBody);
        }
        Ok(Self {
            id: id.into(),
            title: title.into(),
            attachments: code_blocks(&body),
            body,
            source_meta: SourceMeta::default(),
        })
    }

    /// Reads a JSON report (`id`, `title`, `body`, `source_meta`) or a
    /// markdown file whose first `# ` heading is the title.
    pub fn from_path(path: &Path) -> Result<Self, ReportError> {
        let unreadable = |message: String| ReportError::Unreadable {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| unreadable(e.to_string()))?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if path.extension().is_some_and(|e| e == "json") {
            let file: ReportFile = serde_json::from_str(&text).map_err(|e| unreadable(e.to_string()))?;
            let mut report = Self::new(file.id.unwrap_or(stem), file.title, file.body)?;
            report.source_meta = file.source_meta;
            return Ok(report);
        }
        let mut title = String::new();
        let mut body_start = 0;
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            offset += line.len();
            if let Some(t) = line.trim_end().strip_prefix("# ") {
                title = t.trim().to_string();
                body_start = offset;
                break;
            }
            if !line.trim().is_empty() {
                break;
            }
        }
        Self::new(stem, title, text[body_start..].trim().to_string())
    }

    /// Retrieval query text.
    pub fn query_text(&self) -> String {
        format!("{}\n{}", self.title, self.body)
    }

    /// Title plus the first two paragraphs.
    pub fn opening(&self) -> String {
        self.body
            .split("\n\n")
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .take(2)
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Extracted,
    Inferred,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Extracted => "extracted",
            Provenance::Inferred => "inferred",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldProvenance {
    pub core_problem: Provenance,
    pub observed_behaviour: Provenance,
    pub expected_behaviour: Provenance,
    pub reproduction_steps: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestructuredReport {
    pub core_problem: String,
    pub observed_behaviour: String,
    pub expected_behaviour: String,
    pub reproduction_steps: Vec<String>,
    pub provenance: FieldProvenance,
    /// Produced by the deterministic fallback.
    pub degraded: bool,
}

const HEADERS: [&str; 4] = ["CORE_PROBLEM", "OBSERVED_BEHAVIOUR", "EXPECTED_BEHAVIOUR", "REPRODUCTION_STEPS"];

pub fn section_format() -> String {
    HEADERS.iter().map(|h| format!("=== {h} ===")).collect::<Vec<_>>().join("\n")
}

/// Python tracebacks in `text`, each from the `Traceback` line through the
/// exception line, as byte-exact substrings.
pub fn tracebacks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut pos = 0;
    while let Some(found) = text[pos..].find("Traceback (most recent call last):") {
        let start = pos + found;
        let mut end = start;
        let mut offset = start;
        let mut first = true;
        for line in text[start..].split_inclusive('\n') {
            let body = line.trim_end_matches(['\n', '\r']);
            offset += line.len();
            if first {
                first = false;
                end = start + body.len();
                continue;
            }
            if body.starts_with(' ') || body.starts_with('\t') {
                end = offset - (line.len() - body.len());
                continue;
            }
            if !body.trim().is_empty() {
                end = offset - (line.len() - body.len());
            }
            break;
        }
        out.push(&text[start..end]);
        pos = end.max(start + 1);
    }
    out
}

fn list_item(line: &str) -> Option<&str> {
    let re = Regex::new(r"^\s*(?:\d+[.)]|[-*+])\s+(.+?)\s*$").expect("static regex");
    re.captures(line).map(|c| c.get(1).expect("group").as_str())
}

/// Steps listed under a "steps to reproduce" heading in the body.
pub fn explicit_steps(body: &str) -> Option<Vec<String>> {
    let heading = Regex::new(r"(?i)^[\s#*_=>-]*(?:steps to reproduce|to reproduce|reproduction[ _]steps)[\s*_=:]*(.*)$")
        .expect("static regex");
    let lines: Vec<&str> = body.lines().collect();
    let idx = lines.iter().position(|l| heading.is_match(l))?;
    // inline list on the heading line: "Steps to reproduce: 1. a 2. b"
    let tail = heading.captures(lines[idx]).and_then(|c| c.get(1)).map_or("", |m| m.as_str());
    let marker = Regex::new(r"(?:^|\s)\d+[.)]\s+").expect("static regex");
    if marker.is_match(tail) {
        let mut parts = marker.split(tail);
        parts.next();
        let steps: Vec<String> = parts.map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        if !steps.is_empty() {
            return Some(steps);
        }
    }
    let mut steps = Vec::new();
    for line in &lines[idx + 1..] {
        if line.trim().is_empty() {
            if steps.is_empty() {
                continue;
            }
            break;
        }
        match list_item(line) {
            Some(item) => steps.push(item.to_string()),
            None if steps.is_empty() => return None,
            None => break,
        }
    }
    (!steps.is_empty()).then_some(steps)
}

fn parse_steps(text: &str) -> Vec<String> {
    let mut steps: Vec<String> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match list_item(line) {
            Some(item) => steps.push(item.to_string()),
            None => match steps.last_mut() {
                Some(last) if line.starts_with(char::is_whitespace) => {
                    last.push(' ');
                    last.push_str(line.trim());
                }
                _ => steps.push(line.trim().to_string()),
            },
        }
    }
    steps
}

/// Splits a completion into the four sections.
pub fn parse_sections(text: &str) -> Result<[String; 4], String> {
    let header = Regex::new(r"^\s*=+\s*([A-Z_ ]+?)\s*=+\s*$").expect("static regex");
    let mut sections: [Option<String>; 4] = Default::default();
    let mut current: Option<usize> = None;
    for line in text.lines() {
        if let Some(c) = header.captures(line) {
            let name = c[1].trim().replace(' ', "_");
            current = HEADERS.iter().position(|h| *h == name);
            if let Some(i) = current {
                sections[i].get_or_insert_with(String::new);
            }
            continue;
        }
        if let Some(i) = current {
            let s = sections[i].get_or_insert_with(String::new);
            s.push_str(line);
            s.push('\n');
        }
    }
    let mut out: [String; 4] = Default::default();
    for (i, s) in sections.into_iter().enumerate() {
        let s = s.ok_or_else(|| format!("missing section {}", HEADERS[i]))?;
        let trimmed = s.trim_matches('\n').trim_end().to_string();
        if trimmed.trim().is_empty() {
            return Err(format!("section {} is empty", HEADERS[i]));
        }
        out[i] = trimmed;
    }
    Ok(out)
}

fn provenance_of(text: &str, raw: &str) -> Provenance {
    if raw.contains(text.trim()) {
        Provenance::Extracted
    } else {
        Provenance::Inferred
    }
}

impl RestructuredReport {
    /// Post-processing shared by every path: verbatim tracebacks and
    /// explicit steps always win over model output.
    fn from_sections(report: &BugReport, sections: [String; 4]) -> Self {
        let [core, mut observed, expected, steps_text] = sections;
        let raw = format!("{}\n{}", report.title, report.body);
        let mut observed_prov = provenance_of(&observed, &raw);
        for tb in tracebacks(&report.body) {
            if !observed.contains(tb) {
                observed.push_str("\n\n");
                observed.push_str(tb);
            }
            observed_prov = Provenance::Extracted;
        }
        let (steps, steps_prov) = match explicit_steps(&report.body) {
            Some(steps) => (steps, Provenance::Extracted),
            None => (parse_steps(&steps_text), Provenance::Inferred),
        };
        Self {
            provenance: FieldProvenance {
                core_problem: provenance_of(&core, &raw),
                observed_behaviour: observed_prov,
                expected_behaviour: provenance_of(&expected, &raw),
                reproduction_steps: steps_prov,
            },
            core_problem: core,
            observed_behaviour: observed,
            expected_behaviour: expected,
            reproduction_steps: steps,
            degraded: false,
        }
    }

    /// Deterministic restructuring used when the model output is unusable.
    pub fn fallback(report: &BugReport) -> Self {
        let error_blocks: Vec<&str> = report
            .attachments
            .iter()
            .map(String::as_str)
            .filter(|b| b.contains("Error") || b.contains("Traceback") || b.contains("Exception"))
            .collect();
        let mut observed: Vec<String> = error_blocks.iter().map(|b| b.trim_end().to_string()).collect();
        for tb in tracebacks(&report.body) {
            if !observed.iter().any(|o| o.contains(tb)) {
                observed.push(tb.to_string());
            }
        }
        let mut remainder = report.body.clone();
        for b in &error_blocks {
            remainder = remainder.replacen(b, "", 1);
        }
        for tb in tracebacks(&report.body) {
            remainder = remainder.replacen(tb, "", 1);
        }
        let remainder = remainder.replace("```\n```", "").trim().to_string();
        let observed = if observed.is_empty() {
            report.opening()
        } else {
            observed.join("\n\n")
        };
        let core = if report.title.trim().is_empty() {
            report.opening()
        } else {
            report.title.trim().to_string()
        };
        let (steps, steps_prov) = match explicit_steps(&report.body) {
            Some(s) => (s, Provenance::Extracted),
            None => (Vec::new(), Provenance::Inferred),
        };
        Self {
            core_problem: core,
            observed_behaviour: observed,
            expected_behaviour: if remainder.is_empty() { report.body.trim().to_string() } else { remainder },
            reproduction_steps: steps,
            provenance: FieldProvenance {
                core_problem: Provenance::Extracted,
                observed_behaviour: Provenance::Extracted,
                expected_behaviour: Provenance::Extracted,
                reproduction_steps: steps_prov,
            },
            degraded: true,
        }
    }

    /// The raw report in restructured shape, used when restructuring is disabled.
    pub fn passthrough(report: &BugReport) -> Self {
        let (steps, steps_prov) = match explicit_steps(&report.body) {
            Some(s) => (s, Provenance::Extracted),
            None => (Vec::new(), Provenance::Inferred),
        };
        Self {
            core_problem: report.title.clone(),
            observed_behaviour: report.body.clone(),
            expected_behaviour: "(not separated from the raw report)".to_string(),
            reproduction_steps: steps,
            provenance: FieldProvenance {
                core_problem: Provenance::Extracted,
                observed_behaviour: Provenance::Extracted,
                expected_behaviour: Provenance::Extracted,
                reproduction_steps: steps_prov,
            },
            degraded: false,
        }
    }

    /// Section text in the completion format; parses back to the same sections.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "=== CORE_PROBLEM ===\n{}\n", self.core_problem);
        let _ = writeln!(out, "=== OBSERVED_BEHAVIOUR ===\n{}\n", self.observed_behaviour);
        let _ = writeln!(out, "=== EXPECTED_BEHAVIOUR ===\n{}\n", self.expected_behaviour);
        let _ = writeln!(out, "=== REPRODUCTION_STEPS ===");
        for (i, s) in self.reproduction_steps.iter().enumerate() {
            let _ = writeln!(out, "{}. {}", i + 1, s);
        }
        out
    }

    /// Markdown with provenance annotations for `report.structured.md`.
    pub fn to_markdown(&self) -> String {
        let p = &self.provenance;
        let mut out = String::from("# Structured bug report\n\n");
        if self.degraded {
            out.push_str("> Produced by the deterministic fallback.\n\n");
        }
        let _ = writeln!(out, "## Core problem ({})\n\n{}\n", p.core_problem, self.core_problem);
        let _ = writeln!(out, "## Observed behaviour ({})\n\n{}\n", p.observed_behaviour, self.observed_behaviour);
        let _ = writeln!(out, "## Expected behaviour ({})\n\n{}\n", p.expected_behaviour, self.expected_behaviour);
        let _ = writeln!(out, "## Reproduction steps ({})\n", p.reproduction_steps);
        for (i, s) in self.reproduction_steps.iter().enumerate() {
            let _ = writeln!(out, "{}. {}", i + 1, s);
        }
        out
    }

    /// Text handed to downstream prompts.
    pub fn prompt_text(&self) -> String {
        self.render()
    }
}

/// One completion, one repair re-prompt on malformed output, then the
/// deterministic fallback.
pub fn restructure(report: &BugReport, complete: &dyn CompletionProvider) -> RestructuredReport {
    let format = section_format();
    let user = prompts::fill(
        prompts::RESTRUCTURE,
        &[
            ("format", &format),
            ("title", &report.title),
            ("opening", &report.opening()),
            ("body", &report.body),
        ],
    );
    let first = prompts::request(ModelRole::Text, task::RESTRUCTURE, user);
    let answer = match complete.complete(&first) {
        Ok(a) => a,
        Err(e) => {
            tracing::warn!(error = %e, "restructuring failed; using fallback");
            return RestructuredReport::fallback(report);
        }
    };
    let problem = match parse_sections(&answer) {
        Ok(sections) => return RestructuredReport::from_sections(report, sections),
        Err(p) => p,
    };
    let retry = prompts::follow_up(&first, &answer, prompts::repair(&problem, &format));
    match complete.complete(&retry).map(|a| parse_sections(&a)) {
        Ok(Ok(sections)) => RestructuredReport::from_sections(report, sections),
        Ok(Err(p)) => {
            tracing::warn!(problem = %p, "restructuring output malformed twice; using fallback");
            RestructuredReport::fallback(report)
        }
        Err(e) => {
            tracing::warn!(error = %e, "restructuring repair failed; using fallback");
            RestructuredReport::fallback(report)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::ScriptedProvider;

    const TB: &str = "Traceback (most recent call last):\n  File \"train.py\", line 3, in <module>\n    fit()\nValueError: shape mismatch";

    fn report_with_tb() -> BugReport {
        BugReport::new("1", "fit crashes", format!("Training fails.\n\n```\n{TB}\n```\n\nIt should train.")).unwrap()
    }

    #[test]
    fn traceback_extraction_is_exact() {
        let body = format!("x\n{TB}\nmore text\n");
        assert_eq!(tracebacks(&body), vec![TB]);
    }

    #[test]
    fn explicit_steps_are_verbatim() {
        let body = "Bug.\n\nSteps to reproduce:\n1. install torch 2.1\n2. run `python train.py --lr 0.1`\n3. watch the loss\n\nThanks";
        assert_eq!(
            explicit_steps(body).unwrap(),
            vec!["install torch 2.1", "run `python train.py --lr 0.1`", "watch the loss"]
        );
        assert_eq!(explicit_steps("Steps to reproduce: 1. a 2. b 3. c").unwrap(), vec!["a", "b", "c"]);
        assert!(explicit_steps("no steps here").is_none());
    }

    #[test]
    fn template_answer_parses_to_its_fields() {
        let answer = "=== CORE_PROBLEM ===\nfit crashes\n=== OBSERVED_BEHAVIOUR ===\nValueError\n=== EXPECTED_BEHAVIOUR ===\nno crash\n=== REPRODUCTION_STEPS ===\n1. build model\n2. call fit with batch_size=32\n";
        let provider = ScriptedProvider::constant(answer);
        let r = BugReport::new("1", "t", "body without traceback").unwrap();
        let s = restructure(&r, &provider);
        assert_eq!(s.core_problem, "fit crashes");
        assert_eq!(s.observed_behaviour, "ValueError");
        assert_eq!(s.expected_behaviour, "no crash");
        assert_eq!(s.reproduction_steps, vec!["build model", "call fit with batch_size=32"]);
        assert_eq!(s.provenance.reproduction_steps, Provenance::Inferred);
        assert!(!s.degraded);
    }

    #[test]
    fn traceback_is_kept_even_if_model_drops_it() {
        let answer = "=== CORE_PROBLEM ===\na\n=== OBSERVED_BEHAVIOUR ===\nit crashes\n=== EXPECTED_BEHAVIOUR ===\nb\n=== REPRODUCTION_STEPS ===\n1. c\n";
        let s = restructure(&report_with_tb(), &ScriptedProvider::constant(answer));
        assert!(s.observed_behaviour.contains(TB));
    }

    #[test]
    fn malformed_twice_falls_back() {
        let provider = ScriptedProvider::constant("no sections at all");
        let s = restructure(&report_with_tb(), &provider);
        assert!(s.degraded);
        assert_eq!(s.core_problem, "fit crashes");
        assert!(s.observed_behaviour.contains(TB));
        assert!(s.expected_behaviour.contains("It should train."));
        assert!(s.reproduction_steps.is_empty());
        assert_eq!(provider.calls().len(), 2);
        let failing = restructure(&report_with_tb(), &ScriptedProvider::failing());
        assert!(failing.degraded);
    }

    #[test]
    fn markdown_report_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bug-7.md");
        std::fs::write(&path, "# Loss is NaN\n\nAfter a few steps the loss becomes nan.\n").unwrap();
        let r = BugReport::from_path(&path).unwrap();
        assert_eq!((r.id.as_str(), r.title.as_str()), ("bug-7", "Loss is NaN"));
        assert_eq!(r.body, "After a few steps the loss becomes nan.");
        assert!(matches!(BugReport::new("x", "t", "  "), Err(ReportError::EmptyBody)));
    }
}
