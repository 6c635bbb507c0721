//! Model-approximated runtime feedback.
//!
//! Nothing is executed here. The model predicts the script's final state,
//! the state is mapped onto a bug taxonomy, and the category's symptoms are
//! compared with the report. Every failure path ends in a non-pass.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{CompletionProvider, ModelRole};
use crate::prompts::{self, answer_field, task};
use crate::report::RestructuredReport;
use crate::tokenize::tokenize;

pub const DEFAULT_THRESHOLD: f64 = 0.7;

pub const BUNDLED_TAXONOMY: &str = include_str!("../data/taxonomy.toml");

pub const FAMILIES: [&str; 5] = ["training", "model", "tensor_api", "data", "environment"];

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("taxonomy file {path}: {message}")]
    Unreadable { path: String, message: String },
    #[error("taxonomy is malformed: {0}")]
    Malformed(String),
    #[error("taxonomy has no categories")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictedOutcome {
    Crash,
    SilentDegradation,
    Clean,
}

impl PredictedOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            PredictedOutcome::Crash => "crash",
            PredictedOutcome::SilentDegradation => "silent_degradation",
            PredictedOutcome::Clean => "clean",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace([' ', '-'], "_").as_str() {
            "crash" => Some(PredictedOutcome::Crash),
            "silent_degradation" | "silent" | "degradation" => Some(PredictedOutcome::SilentDegradation),
            "clean" => Some(PredictedOutcome::Clean),
            _ => None,
        }
    }
}

impl fmt::Display for PredictedOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateApproximation {
    pub predicted_outcome: PredictedOutcome,
    pub predicted_signals: Vec<String>,
    pub rationale: String,
    /// The model's answer was missing or unusable.
    pub low_confidence: bool,
}

impl StateApproximation {
    fn low_confidence(reason: impl Into<String>) -> Self {
        Self {
            predicted_outcome: PredictedOutcome::Clean,
            predicted_signals: Vec::new(),
            rationale: reason.into(),
            low_confidence: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntrySource {
    BundledTaxonomy,
    ModelApproximated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyEntry {
    #[serde(rename = "id")]
    pub category_id: String,
    pub family: String,
    pub name: String,
    pub typical_symptoms: Vec<String>,
    #[serde(default = "bundled_source", skip_serializing_if = "is_bundled")]
    pub source: EntrySource,
    /// Picked by keyword overlap because the model never named a valid id.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

fn bundled_source() -> EntrySource {
    EntrySource::BundledTaxonomy
}

fn is_bundled(s: &EntrySource) -> bool {
    *s == EntrySource::BundledTaxonomy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub version: u32,
    #[serde(rename = "category")]
    pub categories: Vec<TaxonomyEntry>,
}

impl Taxonomy {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_TAXONOMY).expect("bundled taxonomy is valid")
    }

    pub fn parse(text: &str) -> Result<Self, TaxonomyError> {
        let t: Taxonomy = toml::from_str(text).map_err(|e| TaxonomyError::Malformed(e.to_string()))?;
        if t.categories.is_empty() {
            return Err(TaxonomyError::Empty);
        }
        let mut seen = BTreeSet::new();
        for c in &t.categories {
            if !seen.insert(c.category_id.as_str()) {
                return Err(TaxonomyError::Malformed(format!("duplicate category id `{}`", c.category_id)));
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        let text = std::fs::read_to_string(path).map_err(|e| TaxonomyError::Unreadable {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("taxonomy serializes")
    }

    pub fn get(&self, id: &str) -> Option<&TaxonomyEntry> {
        self.categories.iter().find(|c| c.category_id == id)
    }

    fn prompt_listing(&self) -> String {
        self.categories
            .iter()
            .map(|c| format!("- {}: {} (symptoms: {})", c.category_id, c.name, c.typical_symptoms.join("; ")))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Entry whose typical symptoms repeat the most predicted signals
    /// verbatim, then the one sharing the most signal tokens; the first entry
    /// wins ties.
    pub fn nearest(&self, state: &StateApproximation) -> &TaxonomyEntry {
        let signals: BTreeSet<String> = state.predicted_signals.iter().map(|s| s.trim().to_lowercase()).collect();
        let words: BTreeSet<String> = tokenize(&state.predicted_signals.join(" ")).into_iter().collect();
        let mut best = &self.categories[0];
        let mut best_score = (0usize, 0usize);
        for c in &self.categories {
            let exact = c.typical_symptoms.iter().filter(|t| signals.contains(&t.to_lowercase())).count();
            let text = format!("{} {}", c.name, c.typical_symptoms.join(" "));
            let entry: BTreeSet<String> = tokenize(&text).into_iter().collect();
            let score = (exact, entry.intersection(&words).count());
            if score > best_score {
                best = c;
                best_score = score;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymptomMatch {
    pub script_symptoms: Vec<String>,
    pub report_symptoms: Vec<String>,
    pub similarity: f64,
    pub threshold: f64,
    pub passed: bool,
    /// No usable similarity was returned; the score was forced to 0.
    pub parse_failed: bool,
}

impl SymptomMatch {
    pub fn new(script_symptoms: Vec<String>, report_symptoms: Vec<String>, similarity: f64, threshold: f64) -> Self {
        let similarity = clamp_similarity(similarity);
        Self {
            script_symptoms,
            report_symptoms,
            similarity,
            threshold,
            passed: similarity >= threshold,
            parse_failed: false,
        }
    }

    /// Symptoms on one side only, `(script_only, report_only)`, compared case-insensitively.
    pub fn diff(&self) -> (Vec<String>, Vec<String>) {
        let norm = |v: &[String]| v.iter().map(|s| s.trim().to_lowercase()).collect::<BTreeSet<_>>();
        let script = norm(&self.script_symptoms);
        let report = norm(&self.report_symptoms);
        let only = |v: &[String], other: &BTreeSet<String>| {
            v.iter().filter(|s| !other.contains(&s.trim().to_lowercase())).cloned().collect::<Vec<_>>()
        };
        (only(&self.script_symptoms, &report), only(&self.report_symptoms, &script))
    }
}

pub fn clamp_similarity(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split([';', '\n'])
        .map(|x| x.trim().trim_matches('"').trim())
        .filter(|x| !x.is_empty() && !x.eq_ignore_ascii_case("none"))
        .map(str::to_string)
        .collect()
}

fn is_exception_signal(s: &str) -> bool {
    let re = Regex::new(r"(?i)\b\w*(?:error|exception|oom|interrupt|exit)\b|out of memory|assert").expect("static regex");
    re.is_match(s)
}

fn is_metric_signal(s: &str) -> bool {
    const WORDS: [&str; 12] =
        ["loss", "accuracy", "acc", "memory", "nan", "inf", "metric", "gradient", "gradients", "precision", "recall", "perplexity"];
    tokenize(s).iter().any(|t| WORDS.contains(&t.as_str()))
}

fn parse_state(answer: &str) -> Result<StateApproximation, String> {
    let outcome = answer_field(answer, "OUTCOME").ok_or("missing OUTCOME line")?;
    let predicted_outcome =
        PredictedOutcome::parse(&outcome).ok_or_else(|| format!("OUTCOME `{outcome}` is not crash, silent_degradation or clean"))?;
    let predicted_signals = answer_field(answer, "SIGNALS").map(|s| split_list(&s)).unwrap_or_default();
    match predicted_outcome {
        PredictedOutcome::Crash if !predicted_signals.iter().any(|s| is_exception_signal(s)) => {
            return Err("a crash needs at least one exception type in SIGNALS".into())
        }
        PredictedOutcome::SilentDegradation if !predicted_signals.iter().any(|s| is_metric_signal(s)) => {
            return Err("a silent degradation needs at least one metric observation in SIGNALS".into())
        }
        _ => {}
    }
    Ok(StateApproximation {
        predicted_outcome,
        predicted_signals,
        rationale: answer_field(answer, "RATIONALE").unwrap_or_default(),
        low_confidence: false,
    })
}

const STATE_FORMAT: &str = "OUTCOME: crash | silent_degradation | clean\nSIGNALS: <semicolon-separated observations>\nRATIONALE: <short reasoning>";
const TAXONOMY_FORMAT: &str = "CATEGORY: <category id>\nor\nNEW_CATEGORY: <name> | <semicolon-separated typical symptoms>";
const SYMPTOM_FORMAT: &str =
    "SCRIPT_SYMPTOMS: <semicolon-separated list>\nREPORT_SYMPTOMS: <semicolon-separated list>\nSIMILARITY: <number between 0 and 1>";

pub fn approximate_runtime(script: &str, context: &str, complete: &dyn CompletionProvider) -> StateApproximation {
    if script.trim().is_empty() {
        return StateApproximation::low_confidence("empty script");
    }
    let user = prompts::fill(prompts::RUNTIME_STATE, &[("script", script), ("context", context)]);
    let first = prompts::request(ModelRole::Code, task::RUNTIME_STATE, user);
    let answer = match complete.complete(&first) {
        Ok(a) => a,
        Err(e) => return StateApproximation::low_confidence(format!("provider failure: {e}")),
    };
    let problem = match parse_state(&answer) {
        Ok(s) => return s,
        Err(p) => p,
    };
    let retry = prompts::follow_up(&first, &answer, prompts::repair(&problem, STATE_FORMAT));
    match complete.complete(&retry) {
        Ok(a) => parse_state(&a).unwrap_or_else(|p| StateApproximation::low_confidence(format!("unparseable state: {p}"))),
        Err(e) => StateApproximation::low_confidence(format!("provider failure: {e}")),
    }
}

fn parse_taxonomy_answer(answer: &str, taxonomy: &Taxonomy) -> Result<TaxonomyEntry, String> {
    if let Some(id) = answer_field(answer, "CATEGORY") {
        return taxonomy.get(&id).cloned().ok_or_else(|| format!("`{id}` is not a category id of the taxonomy"));
    }
    if let Some(new) = answer_field(answer, "NEW_CATEGORY") {
        let (name, symptoms) = new.split_once('|').unwrap_or((new.as_str(), ""));
        let name = name.trim();
        if name.is_empty() {
            return Err("NEW_CATEGORY has no name".into());
        }
        let slug: String = tokenize(name).join("_");
        return Ok(TaxonomyEntry {
            category_id: format!("approximated.{slug}"),
            family: "approximated".into(),
            name: name.to_string(),
            typical_symptoms: split_list(symptoms),
            source: EntrySource::ModelApproximated,
            fallback: false,
        });
    }
    Err("answer has neither a CATEGORY nor a NEW_CATEGORY line".into())
}

pub fn map_to_taxonomy(state: &StateApproximation, taxonomy: &Taxonomy, complete: &dyn CompletionProvider) -> TaxonomyEntry {
    let nearest = || TaxonomyEntry {
        fallback: true,
        ..taxonomy.nearest(state).clone()
    };
    let signals = state.predicted_signals.join("; ");
    let user = prompts::fill(
        prompts::TAXONOMY,
        &[
            ("outcome", state.predicted_outcome.as_str()),
            ("signals", &signals),
            ("taxonomy", &taxonomy.prompt_listing()),
        ],
    );
    let first = prompts::request(ModelRole::Text, task::TAXONOMY, user);
    let Ok(answer) = complete.complete(&first) else { return nearest() };
    let problem = match parse_taxonomy_answer(&answer, taxonomy) {
        Ok(e) => return e,
        Err(p) => p,
    };
    let retry = prompts::follow_up(&first, &answer, prompts::repair(&problem, TAXONOMY_FORMAT));
    match complete.complete(&retry).map(|a| parse_taxonomy_answer(&a, taxonomy)) {
        Ok(Ok(e)) => e,
        _ => nearest(),
    }
}

fn parse_symptoms(answer: &str) -> Result<(Vec<String>, Vec<String>, f64), String> {
    let raw = answer_field(answer, "SIMILARITY").ok_or("missing SIMILARITY line")?;
    let number = Regex::new(r"^[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?").expect("static regex");
    let m = number.find(raw.trim()).ok_or_else(|| format!("SIMILARITY `{raw}` is not a number"))?;
    let value: f64 = m.as_str().parse().map_err(|_| format!("SIMILARITY `{raw}` is not a number"))?;
    if !value.is_finite() {
        return Err(format!("SIMILARITY `{raw}` is not finite"));
    }
    let script = answer_field(answer, "SCRIPT_SYMPTOMS").map(|s| split_list(&s)).unwrap_or_default();
    let report = answer_field(answer, "REPORT_SYMPTOMS").map(|s| split_list(&s)).unwrap_or_default();
    Ok((script, report, value))
}

pub fn derive_and_match(
    entry: &TaxonomyEntry,
    script: &str,
    report: &RestructuredReport,
    threshold: f64,
    complete: &dyn CompletionProvider,
) -> SymptomMatch {
    let typical = entry.typical_symptoms.join("; ");
    let category = format!("{} ({})", entry.name, entry.category_id);
    let user = prompts::fill(
        prompts::SYMPTOMS,
        &[
            ("category", &category),
            ("typical", &typical),
            ("script", script),
            ("observed", &report.observed_behaviour),
        ],
    );
    let failed = || SymptomMatch {
        parse_failed: true,
        ..SymptomMatch::new(entry.typical_symptoms.clone(), vec![report.observed_behaviour.trim().to_string()], 0.0, threshold)
    };
    let first = prompts::request(ModelRole::Text, task::SYMPTOMS, user);
    let Ok(answer) = complete.complete(&first) else { return failed() };
    let problem = match parse_symptoms(&answer) {
        Ok((s, r, v)) => return SymptomMatch::new(s, r, v, threshold),
        Err(p) => p,
    };
    let retry = prompts::follow_up(&first, &answer, prompts::repair(&problem, SYMPTOM_FORMAT));
    match complete.complete(&retry).map(|a| parse_symptoms(&a)) {
        Ok(Ok((s, r, v))) => SymptomMatch::new(s, r, v, threshold),
        _ => failed(),
    }
}

/// Result of the full runtime check for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeAssessment {
    pub state: StateApproximation,
    pub category: Option<TaxonomyEntry>,
    pub symptoms: Option<SymptomMatch>,
}

impl RuntimeAssessment {
    pub fn passed(&self) -> bool {
        !self.state.low_confidence && self.symptoms.as_ref().is_some_and(|m| m.passed)
    }
}

#[derive(Debug, Clone)]
pub struct SymptomOracle {
    pub taxonomy: Taxonomy,
    pub threshold: f64,
}

impl Default for SymptomOracle {
    fn default() -> Self {
        Self {
            taxonomy: Taxonomy::bundled(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl SymptomOracle {
    /// State, category and symptom match in sequence. A low-confidence state
    /// stops early; it can never pass.
    pub fn assess(
        &self,
        script: &str,
        context: &str,
        report: &RestructuredReport,
        complete: &dyn CompletionProvider,
    ) -> RuntimeAssessment {
        let state = approximate_runtime(script, context, complete);
        if state.low_confidence {
            return RuntimeAssessment {
                state,
                category: None,
                symptoms: None,
            };
        }
        let category = map_to_taxonomy(&state, &self.taxonomy, complete);
        let symptoms = derive_and_match(&category, script, report, self.threshold, complete);
        RuntimeAssessment {
            state,
            category: Some(category),
            symptoms: Some(symptoms),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::ScriptedProvider;

    #[test]
    fn bundled_taxonomy_covers_every_family_and_round_trips() {
        let t = Taxonomy::bundled();
        for family in FAMILIES {
            assert!(t.categories.iter().any(|c| c.family == family), "{family}");
        }
        assert_eq!(Taxonomy::parse(&t.to_toml()).unwrap(), t);
    }

    #[test]
    fn crash_without_exception_is_rejected() {
        assert!(parse_state("OUTCOME: crash\nSIGNALS: something odd").is_err());
        let s = parse_state("OUTCOME: crash\nSIGNALS: ValueError; shape mismatch\nRATIONALE: x").unwrap();
        assert_eq!(s.predicted_signals, vec!["ValueError", "shape mismatch"]);
        assert!(parse_state("OUTCOME: silent_degradation\nSIGNALS: it is slow").is_err());
        assert!(parse_state("OUTCOME: silent_degradation\nSIGNALS: high loss values").is_ok());
    }

    #[test]
    fn unparseable_state_twice_is_low_confidence_clean() {
        let p = ScriptedProvider::constant("I think it works.");
        let s = approximate_runtime("print(1)", "", &p);
        assert!(s.low_confidence);
        assert_eq!(s.predicted_outcome, PredictedOutcome::Clean);
        assert_eq!(p.calls().len(), 2);
    }

    #[test]
    fn similarity_parsing_is_bounded() {
        let (_, _, v) = parse_symptoms("SIMILARITY: 1.7").unwrap();
        assert_eq!(SymptomMatch::new(vec![], vec![], v, 0.7).similarity, 1.0);
        assert!(parse_symptoms("SIMILARITY: high").is_err());
        let (_, _, v) = parse_symptoms("SIMILARITY: **0.85** (strong)").unwrap();
        assert_eq!(v, 0.85);
    }

    #[test]
    fn nearest_entry_by_overlap() {
        let t = Taxonomy::bundled();
        let s = StateApproximation {
            predicted_outcome: PredictedOutcome::Crash,
            predicted_signals: vec!["MemoryError".into(), "memory growth".into()],
            rationale: String::new(),
            low_confidence: false,
        };
        assert_eq!(t.nearest(&s).category_id, "environment.memory");
    }
}
