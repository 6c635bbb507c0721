//! Budgeted generate/validate/refine loop over the ranked contexts.
//!
//! Each attempt generates one script and runs it through the structural,
//! static, relevance and runtime gates in that order, stopping at the first
//! non-pass. A relevance rejection abandons the context immediately.

pub mod lint;

use std::fmt;
use std::sync::OnceLock;

use chrono::{SecondsFormat, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::context::ReproductionContext;
use crate::gateway::{CompletionProvider, ModelRole};
use crate::grammar::Grammar;
use crate::oracle::{RuntimeAssessment, SymptomOracle};
use crate::plan::{render_stages, ReproductionPlan};
use crate::prompts::{self, answer_field, task};
use crate::report::RestructuredReport;

use lint::StaticAnalyzer;

pub const DEFAULT_MAX_ATTEMPTS: usize = 5;
pub const DEFAULT_MAX_CONTEXTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Structural,
    Static,
    Relevance,
    Runtime,
}

impl Stage {
    pub const ORDER: [Stage; 4] = [Stage::Structural, Stage::Static, Stage::Relevance, Stage::Runtime];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Structural => "structural",
            Stage::Static => "static",
            Stage::Relevance => "relevance",
            Stage::Runtime => "runtime",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Regenerate,
    SwitchContext,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detail {
    pub kind: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
}

impl Detail {
    pub fn new(kind: impl Into<String>, message: impl Into<String>, line: Option<usize>) -> Self {
        Self {
            kind: kind.into(),
            message: message.into(),
            line,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub stage: Stage,
    pub verdict: Verdict,
    pub details: Vec<Detail>,
    pub timestamp: String,
    /// Set when the stage passed only because it could not decide.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    /// Stage-specific payload, e.g. the runtime assessment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<serde_json::Value>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl FeedbackRecord {
    pub fn pass(stage: Stage) -> Self {
        Self::new(stage, Verdict::Pass, Vec::new())
    }

    pub fn new(stage: Stage, verdict: Verdict, details: Vec<Detail>) -> Self {
        Self {
            stage,
            verdict,
            details,
            timestamp: now(),
            warning: None,
            data: None,
        }
    }

    fn with_warning(mut self, warning: impl Into<String>) -> Self {
        self.warning = Some(warning.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScript {
    pub attempt: usize,
    pub context_rank: usize,
    pub text: String,
    pub lineage: Vec<FeedbackRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStatus {
    Reproduced,
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextEnd {
    Reproduced,
    SwitchedByRelevance,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    ContextStarted {
        module_id: String,
        plan_degraded: bool,
    },
    Generated {
        script_sha256: String,
        lines: usize,
        reprompted: bool,
    },
    GenerationFailed {
        reason: String,
    },
    Feedback {
        feedback: FeedbackRecord,
    },
    ContextFinished {
        reason: ContextEnd,
    },
    Finished {
        status: OutcomeStatus,
        attempts_total: usize,
        contexts_tried: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: usize,
    pub timestamp: String,
    pub context_rank: usize,
    pub attempt: usize,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentOutcome {
    pub status: OutcomeStatus,
    pub final_script: Option<CandidateScript>,
    pub attempts_total: usize,
    pub contexts_tried: usize,
    pub trace: Vec<TraceEvent>,
}

impl AgentOutcome {
    pub fn trace_jsonl(&self) -> String {
        self.trace
            .iter()
            .map(|e| serde_json::to_string(e).expect("trace events serialize") + "\n")
            .collect()
    }
}

/// Removes every `timestamp` field, recursively, for run-to-run comparison.
pub fn strip_timestamps(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.remove("timestamp");
            map.values_mut().for_each(strip_timestamps);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_timestamps),
        _ => {}
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSwitches {
    pub structural: bool,
    pub static_analysis: bool,
    pub relevance: bool,
    pub runtime: bool,
}

impl Default for StageSwitches {
    fn default() -> Self {
        Self {
            structural: true,
            static_analysis: true,
            relevance: true,
            runtime: true,
        }
    }
}

impl StageSwitches {
    pub fn enabled(&self, stage: Stage) -> bool {
        match stage {
            Stage::Structural => self.structural,
            Stage::Static => self.static_analysis,
            Stage::Relevance => self.relevance,
            Stage::Runtime => self.runtime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub max_attempts: usize,
    pub max_contexts: usize,
    pub stages: StageSwitches,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            max_contexts: DEFAULT_MAX_CONTEXTS,
            stages: StageSwitches::default(),
        }
    }
}

/// The four gates. [`LiveStages`] is the real implementation; tests swap in
/// scheduled verdicts.
pub trait FeedbackStages {
    fn check(
        &self,
        stage: Stage,
        script: &CandidateScript,
        context: &ReproductionContext,
        report: &RestructuredReport,
    ) -> FeedbackRecord;
}

pub struct LiveStages<'a> {
    pub grammar: &'a Grammar,
    pub analyzer: &'a StaticAnalyzer,
    pub oracle: &'a SymptomOracle,
    pub complete: &'a dyn CompletionProvider,
}

impl FeedbackStages for LiveStages<'_> {
    fn check(
        &self,
        stage: Stage,
        script: &CandidateScript,
        context: &ReproductionContext,
        report: &RestructuredReport,
    ) -> FeedbackRecord {
        match stage {
            Stage::Structural => structural_check(script, self.grammar),
            Stage::Static => static_check(script, self.analyzer),
            Stage::Relevance => relevance_check(script, report, self.complete),
            Stage::Runtime => {
                runtime_feedback(&self.oracle.assess(&script.text, &context.rendered, report, self.complete))
            }
        }
    }
}

pub fn structural_check(script: &CandidateScript, grammar: &Grammar) -> FeedbackRecord {
    match grammar.first_syntax_error(&script.text) {
        None => FeedbackRecord::pass(Stage::Structural),
        Some(d) => FeedbackRecord::new(
            Stage::Structural,
            Verdict::Regenerate,
            vec![Detail::new("syntax_error", format!("line {}: {}", d.line, d.message), Some(d.line))],
        ),
    }
}

pub fn static_check(script: &CandidateScript, analyzer: &StaticAnalyzer) -> FeedbackRecord {
    let report = analyzer.analyze(&script.text);
    let blocking: Vec<Detail> = report
        .blocking()
        .map(|f| Detail::new(f.class.as_str(), format!("{}: {}", f.class.as_str(), f.message), f.line))
        .collect();
    let mut record = if blocking.is_empty() {
        let notes = report
            .findings
            .iter()
            .map(|f| Detail::new("note", format!("{}: {}", f.symbol, f.message), f.line))
            .collect();
        FeedbackRecord::new(Stage::Static, Verdict::Pass, notes)
    } else {
        FeedbackRecord::new(Stage::Static, Verdict::Regenerate, blocking)
    };
    if let Some(reason) = &report.fallback_reason {
        record.warning = Some(format!("built-in checks used ({reason})"));
    }
    record.data = Some(serde_json::json!({ "analyzer": report.analyzer }));
    record
}

fn parse_relevance(answer: &str) -> Result<(bool, String), String> {
    let verdict = answer_field(answer, "VERDICT").ok_or("missing VERDICT line")?;
    let rationale = answer_field(answer, "RATIONALE").unwrap_or_default();
    match verdict.to_ascii_lowercase().trim_matches(['.', ' ']) {
        "relevant" => Ok((true, rationale)),
        "irrelevant" | "not relevant" => Ok((false, rationale)),
        other => Err(format!("VERDICT `{other}` is neither relevant nor irrelevant")),
    }
}

pub fn relevance_check(script: &CandidateScript, report: &RestructuredReport, complete: &dyn CompletionProvider) -> FeedbackRecord {
    const FORMAT: &str = "VERDICT: relevant | irrelevant\nRATIONALE: <one or two sentences>";
    let user = prompts::fill(prompts::RELEVANCE, &[("report", &report.prompt_text()), ("script", &script.text)]);
    let first = prompts::request(ModelRole::Text, task::RELEVANCE, user);
    let decide = |relevant: bool, rationale: String| {
        if relevant {
            FeedbackRecord::pass(Stage::Relevance)
        } else {
            let message = if rationale.is_empty() { "script judged irrelevant to the report".to_string() } else { rationale };
            FeedbackRecord::new(Stage::Relevance, Verdict::SwitchContext, vec![Detail::new("irrelevant", message, None)])
        }
    };
    let answer = match complete.complete(&first) {
        Ok(a) => a,
        Err(e) => return FeedbackRecord::pass(Stage::Relevance).with_warning(format!("relevance judge unavailable: {e}")),
    };
    let problem = match parse_relevance(&answer) {
        Ok((r, why)) => return decide(r, why),
        Err(p) => p,
    };
    let retry = prompts::follow_up(&first, &answer, prompts::repair(&problem, FORMAT));
    match complete.complete(&retry) {
        Ok(a) => match parse_relevance(&a) {
            Ok((r, why)) => decide(r, why),
            Err(p) => FeedbackRecord::pass(Stage::Relevance).with_warning(format!("relevance answer unparseable twice: {p}")),
        },
        Err(e) => FeedbackRecord::pass(Stage::Relevance).with_warning(format!("relevance judge unavailable: {e}")),
    }
}

pub fn runtime_feedback(assessment: &RuntimeAssessment) -> FeedbackRecord {
    let data = serde_json::to_value(assessment).ok();
    let mut record = if assessment.passed() {
        FeedbackRecord::pass(Stage::Runtime)
    } else if assessment.state.low_confidence {
        FeedbackRecord::new(
            Stage::Runtime,
            Verdict::Regenerate,
            vec![Detail::new("low_confidence", format!("runtime state not approximated: {}", assessment.state.rationale), None)],
        )
    } else {
        let mut details = Vec::new();
        if let Some(cat) = &assessment.category {
            details.push(Detail::new("category", format!("predicted bug category: {} ({})", cat.name, cat.category_id), None));
        }
        if let Some(m) = &assessment.symptoms {
            details.push(Detail::new(
                "similarity",
                format!("symptom similarity {:.2} is below the threshold {:.2}", m.similarity, m.threshold),
                None,
            ));
            let (script_only, report_only) = m.diff();
            for s in script_only {
                details.push(Detail::new("script_only_symptom", format!("script shows `{s}`, which the report does not"), None));
            }
            for s in report_only {
                details.push(Detail::new("missing_symptom", format!("report describes `{s}`, which the script does not show"), None));
            }
        }
        FeedbackRecord::new(Stage::Runtime, Verdict::Regenerate, details)
    };
    record.data = data;
    record
}

/// First ```python block, else the first fenced block of any language.
pub fn extract_code_block(answer: &str) -> Option<String> {
    static FENCE: OnceLock<Regex> = OnceLock::new();
    let re = FENCE.get_or_init(|| Regex::new(r"(?s)```([A-Za-z0-9_+-]*)[^\n]*\n(.*?)```").expect("static regex"));
    let blocks: Vec<(String, String)> =
        re.captures_iter(answer).map(|c| (c[1].to_ascii_lowercase(), c[2].to_string())).collect();
    let pick = blocks
        .iter()
        .find(|(lang, _)| lang == "python" || lang == "py" || lang == "python3")
        .or_else(|| blocks.first())?;
    let code = pick.1.trim_end();
    (!code.trim().is_empty()).then(|| format!("{code}\n"))
}

pub fn render_feedback(prior: &[FeedbackRecord]) -> String {
    let mut lines = Vec::new();
    for r in prior.iter().filter(|r| r.verdict != Verdict::Pass) {
        for d in &r.details {
            let at = d.line.map(|l| format!(" (line {l})")).unwrap_or_default();
            lines.push(format!("- [{}] {}{at}", r.stage, d.message));
        }
    }
    if lines.is_empty() {
        String::new()
    } else {
        format!("\nFeedback on earlier attempts, fix all of it:\n{}\n", lines.join("\n"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GenerationError {
    NoCodeBlock,
    Provider(String),
}

impl fmt::Display for GenerationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GenerationError::NoCodeBlock => f.write_str("no fenced code block after one re-prompt"),
            GenerationError::Provider(e) => write!(f, "provider failure: {e}"),
        }
    }
}

/// Returns the script and whether an extraction re-prompt was needed.
pub fn generate_candidate(
    context: &ReproductionContext,
    plan: &ReproductionPlan,
    report: &RestructuredReport,
    prior_feedback: &[FeedbackRecord],
    attempt: usize,
    complete: &dyn CompletionProvider,
) -> Result<(CandidateScript, bool), GenerationError> {
    let plan_text = render_stages(&plan.stages);
    let feedback = render_feedback(prior_feedback);
    let user = prompts::fill(
        prompts::GENERATE,
        &[
            ("report", &report.prompt_text()),
            ("plan", &plan_text),
            ("context", &context.rendered),
            ("feedback", &feedback),
        ],
    );
    let first = prompts::request(ModelRole::Code, task::GENERATE, user);
    let provider = |e: crate::gateway::GatewayError| GenerationError::Provider(e.to_string());
    let answer = complete.complete(&first).map_err(provider)?;
    let candidate = |text: String| CandidateScript {
        attempt,
        context_rank: context.rank,
        text,
        lineage: prior_feedback.to_vec(),
    };
    if let Some(code) = extract_code_block(&answer) {
        return Ok((candidate(code), false));
    }
    let retry = prompts::follow_up(&first, &answer, prompts::GENERATE_REPAIR.trim_end().to_string());
    let answer = complete.complete(&retry).map_err(provider)?;
    extract_code_block(&answer).map(|code| (candidate(code), true)).ok_or(GenerationError::NoCodeBlock)
}

struct Tracer {
    events: Vec<TraceEvent>,
}

impl Tracer {
    fn push(&mut self, context_rank: usize, attempt: usize, kind: EventKind) {
        let timestamp = match &kind {
            EventKind::Feedback { feedback } => feedback.timestamp.clone(),
            _ => now(),
        };
        self.events.push(TraceEvent {
            seq: self.events.len(),
            timestamp,
            context_rank,
            attempt,
            kind,
        });
    }
}

/// Runs the loop over `contexts` (paired with `plans` by position) in rank
/// order. At most `max_contexts` contexts and `max_attempts` attempts each.
pub fn run_agent(
    report: &RestructuredReport,
    contexts: &[ReproductionContext],
    plans: &[ReproductionPlan],
    stages: &dyn FeedbackStages,
    complete: &dyn CompletionProvider,
    config: &AgentConfig,
) -> AgentOutcome {
    debug_assert_eq!(contexts.len(), plans.len(), "one plan per context");
    let mut tracer = Tracer { events: Vec::new() };
    let mut attempts_total = 0;
    let mut contexts_tried = 0;
    let mut final_script = None;

    'contexts: for (context, plan) in contexts.iter().zip(plans).take(config.max_contexts) {
        contexts_tried += 1;
        let rank = context.rank;
        tracer.push(
            rank,
            0,
            EventKind::ContextStarted {
                module_id: context.module_id.clone(),
                plan_degraded: plan.degraded,
            },
        );
        let mut prior: Vec<FeedbackRecord> = Vec::new();
        for attempt in 1..=config.max_attempts {
            attempts_total += 1;
            let script = match generate_candidate(context, plan, report, &prior, attempt, complete) {
                Ok((script, reprompted)) => {
                    tracer.push(
                        rank,
                        attempt,
                        EventKind::Generated {
                            script_sha256: hex::encode(Sha256::digest(script.text.as_bytes())),
                            lines: script.text.lines().count(),
                            reprompted,
                        },
                    );
                    script
                }
                Err(e) => {
                    tracer.push(rank, attempt, EventKind::GenerationFailed { reason: e.to_string() });
                    continue;
                }
            };
            let mut accepted = true;
            for stage in Stage::ORDER.into_iter().filter(|s| config.stages.enabled(*s)) {
                let record = stages.check(stage, &script, context, report);
                let verdict = record.verdict;
                let keep = (verdict != Verdict::Pass).then(|| record.clone());
                tracer.push(rank, attempt, EventKind::Feedback { feedback: record });
                match verdict {
                    Verdict::Pass => {}
                    Verdict::Regenerate => {
                        prior.extend(keep);
                        accepted = false;
                        break;
                    }
                    Verdict::SwitchContext => {
                        tracer.push(rank, attempt, EventKind::ContextFinished { reason: ContextEnd::SwitchedByRelevance });
                        continue 'contexts;
                    }
                }
            }
            if accepted {
                tracer.push(rank, attempt, EventKind::ContextFinished { reason: ContextEnd::Reproduced });
                final_script = Some(script);
                break 'contexts;
            }
        }
        tracer.push(rank, config.max_attempts, EventKind::ContextFinished { reason: ContextEnd::BudgetExhausted });
    }

    let status = if final_script.is_some() { OutcomeStatus::Reproduced } else { OutcomeStatus::Exhausted };
    tracer.push(
        0,
        0,
        EventKind::Finished {
            status,
            attempts_total,
            contexts_tried,
        },
    );
    AgentOutcome {
        status,
        final_script,
        attempts_total,
        contexts_tried,
        trace: tracer.events,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn code_block_extraction() {
        assert_eq!(extract_code_block("x\n```python\nprint(1)\n```\n").as_deref(), Some("print(1)\n"));
        assert_eq!(
            extract_code_block("```text\nlog\n```\n```py\nimport os\n```").as_deref(),
            Some("import os\n")
        );
        assert_eq!(extract_code_block("```\na = 1\n```").as_deref(), Some("a = 1\n"));
        assert_eq!(extract_code_block("no code here"), None);
    }

    #[test]
    fn relevance_parsing() {
        assert_eq!(parse_relevance("VERDICT: Irrelevant.\nRATIONALE: other module").unwrap(), (false, "other module".into()));
        assert!(parse_relevance("maybe").is_err());
    }

    #[test]
    fn trace_events_serialize_flat() {
        let mut t = Tracer { events: Vec::new() };
        t.push(1, 2, EventKind::Feedback { feedback: FeedbackRecord::pass(Stage::Static) });
        let mut v = serde_json::to_value(&t.events[0]).unwrap();
        assert_eq!(v["event"], "feedback");
        assert_eq!(v["feedback"]["stage"], "static");
        strip_timestamps(&mut v);
        assert!(v.get("timestamp").is_none() && v["feedback"].get("timestamp").is_none());
        let back: TraceEvent = serde_json::from_str(&serde_json::to_string(&t.events[0]).unwrap()).unwrap();
        assert_eq!(back, t.events[0]);
    }
}
