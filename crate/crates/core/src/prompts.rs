//! Versioned prompt templates. Placeholders are written `{{name}}`.

use crate::gateway::{CompletionRequest, Message, ModelRole};

/// Bumped whenever any template text changes; recorded in run artifacts.
pub const PROMPT_VERSION: &str = "1";

pub const SYSTEM_TEXT: &str = include_str!("../prompts/system_text.txt");
pub const SYSTEM_CODE: &str = include_str!("../prompts/system_code.txt");
pub const RESTRUCTURE: &str = include_str!("../prompts/restructure.txt");
pub const REPAIR: &str = include_str!("../prompts/repair.txt");
pub const PLAN: &str = include_str!("../prompts/plan.txt");
pub const GENERATE: &str = include_str!("../prompts/generate.txt");
pub const GENERATE_REPAIR: &str = include_str!("../prompts/generate_repair.txt");
pub const RELEVANCE: &str = include_str!("../prompts/relevance.txt");
pub const RUNTIME_STATE: &str = include_str!("../prompts/runtime_state.txt");
pub const TAXONOMY: &str = include_str!("../prompts/taxonomy.txt");
pub const SYMPTOMS: &str = include_str!("../prompts/symptoms.txt");

/// Task names; scripted providers dispatch on these.
pub mod task {
    pub const RESTRUCTURE: &str = "restructure_report";
    pub const PLAN: &str = "generate_plan";
    pub const GENERATE: &str = "generate_candidate";
    pub const RELEVANCE: &str = "relevance_check";
    pub const RUNTIME_STATE: &str = "approximate_runtime";
    pub const TAXONOMY: &str = "map_to_taxonomy";
    pub const SYMPTOMS: &str = "derive_and_match";
}

pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{{{key}}}}}"), value);
    }
    out
}

fn system_for(role: ModelRole) -> &'static str {
    match role {
        ModelRole::Text => SYSTEM_TEXT,
        ModelRole::Code => SYSTEM_CODE,
    }
}

pub fn request(role: ModelRole, task: &str, user: String) -> CompletionRequest {
    CompletionRequest::new(role, task, vec![Message::system(system_for(role).trim_end()), Message::user(user)])
}

/// Follow-up request carrying the rejected answer and a correction.
pub fn follow_up(first: &CompletionRequest, answer: &str, correction: String) -> CompletionRequest {
    let mut messages = first.messages.clone();
    messages.push(Message::assistant(answer));
    messages.push(Message::user(correction));
    CompletionRequest::new(first.role, first.task.clone(), messages)
}

pub fn repair(problem: &str, format: &str) -> String {
    fill(REPAIR, &[("problem", problem), ("format", format)])
}

/// Value of a `KEY: value` line in a model answer. Keys match case-insensitively
/// and may be wrapped in markdown emphasis or list markers.
pub(crate) fn answer_field(answer: &str, key: &str) -> Option<String> {
    answer.lines().find_map(|line| {
        let l = line.trim().trim_start_matches(['-', '*', '#', '>', ' ']);
        let (k, v) = l.split_once(':')?;
        let k = k.trim().trim_matches(['*', '_', '`']).trim();
        k.eq_ignore_ascii_case(key)
            .then(|| v.trim().trim_matches(['*', '_', '`']).trim().to_string())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_replaces_every_placeholder() {
        assert_eq!(fill("{{a}} and {{a}} {{b}}", &[("a", "x"), ("b", "y")]), "x and x y");
        for t in [RESTRUCTURE, PLAN, GENERATE, RELEVANCE, RUNTIME_STATE, TAXONOMY, SYMPTOMS] {
            assert!(t.contains("{{"), "template without placeholders");
        }
    }

    #[test]
    fn answer_fields_tolerate_markdown() {
        let a = "**VERDICT:** irrelevant\n- rationale: wrong module";
        assert_eq!(answer_field(a, "verdict").as_deref(), Some("irrelevant"));
        assert_eq!(answer_field(a, "RATIONALE").as_deref(), Some("wrong module"));
        assert_eq!(answer_field(a, "similarity"), None);
    }
}
