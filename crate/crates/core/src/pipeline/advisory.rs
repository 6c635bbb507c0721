//! Likely reasons a bug was not reproduced, read off the run's own signals.
//! Advisory only: nothing downstream depends on these labels.

use serde::{Deserialize, Serialize};

use crate::agent::{AgentOutcome, EventKind, OutcomeStatus, Verdict};
use crate::retrieval::ScoredSnippet;

/// Hybrid score under which retrieval counts as weak.
pub const LOW_RELEVANCE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCategory {
    ApiDependency,
    EnvironmentDependent,
    DataDependent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub category: FailureCategory,
    pub signals: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advisory {
    pub status: OutcomeStatus,
    pub diagnostics: Vec<Diagnostic>,
}

const API: [&str; 8] = [
    "unresolved import",
    "invalid call arity",
    "importerror",
    "modulenotfounderror",
    "attributeerror",
    "typeerror",
    "unexpected keyword",
    "deprecated",
];
const ENVIRONMENT: [&str; 7] = ["cuda", "gpu", "distributed", "multi-node", "nccl", "device", "out of memory"];
const DATA: [&str; 7] = ["filenotfounderror", "notfounderror", "no such file", "dataset", "path", "missing file", ".csv"];

pub fn diagnose(outcome: &AgentOutcome, snippets: &[ScoredSnippet]) -> Advisory {
    let mut diagnostics = Vec::new();
    if outcome.status == OutcomeStatus::Exhausted {
        let mut messages = Vec::new();
        for e in &outcome.trace {
            if let EventKind::Feedback { feedback } = &e.kind {
                if feedback.verdict != Verdict::Pass {
                    messages.extend(feedback.details.iter().map(|d| d.message.to_lowercase()));
                    if let Some(data) = &feedback.data {
                        messages.push(data.to_string().to_lowercase());
                    }
                }
            }
        }
        let hits = |words: &[&str]| -> Vec<String> {
            words
                .iter()
                .filter(|w| messages.iter().any(|m| m.contains(*w)))
                .map(|w| format!("feedback mentions `{w}`"))
                .collect()
        };
        let mut api = hits(&API);
        let best = snippets.iter().map(|s| s.hybrid).fold(f64::NEG_INFINITY, f64::max);
        if snippets.is_empty() || best < LOW_RELEVANCE {
            api.push(format!("weak retrieval: best hybrid score {:.3}", best.max(0.0)));
        }
        for (category, signals) in [
            (FailureCategory::ApiDependency, api),
            (FailureCategory::EnvironmentDependent, hits(&ENVIRONMENT)),
            (FailureCategory::DataDependent, hits(&DATA)),
        ] {
            if !signals.is_empty() {
                diagnostics.push(Diagnostic { category, signals });
            }
        }
    }
    Advisory {
        status: outcome.status,
        diagnostics,
    }
}
