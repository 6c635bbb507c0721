//! Self-planning: one staged, checkable reproduction plan per context.

use std::fmt::Write as _;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::context::ReproductionContext;
use crate::gateway::{CompletionProvider, ModelRole};
use crate::prompts::{self, task};
use crate::report::RestructuredReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    EnvironmentSetup,
    DataPreparation,
    ModelSetup,
    Execution,
    Verification,
}

impl StageKind {
    pub const ALL: [StageKind; 5] = [
        StageKind::EnvironmentSetup,
        StageKind::DataPreparation,
        StageKind::ModelSetup,
        StageKind::Execution,
        StageKind::Verification,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::EnvironmentSetup => "environment_setup",
            StageKind::DataPreparation => "data_preparation",
            StageKind::ModelSetup => "model_setup",
            StageKind::Execution => "execution",
            StageKind::Verification => "verification",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        let norm = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        Self::ALL.into_iter().find(|k| k.as_str() == norm)
    }

    /// Kind guessed from a stage title when the `kind:` line is missing.
    fn from_title(title: &str) -> Self {
        let t = title.to_ascii_lowercase();
        if ["verif", "check", "assert", "confirm", "compare"].iter().any(|w| t.contains(w)) {
            StageKind::Verification
        } else if ["environment", "setup", "set up", "install", "depend"].iter().any(|w| t.contains(w)) {
            StageKind::EnvironmentSetup
        } else if t.contains("data") {
            StageKind::DataPreparation
        } else if t.contains("model") {
            StageKind::ModelSetup
        } else {
            StageKind::Execution
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    OutputAssertion,
    ResourceMonitor,
    ErrorVerification,
}

impl CheckKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckKind::OutputAssertion => "output_assertion",
            CheckKind::ResourceMonitor => "resource_monitor",
            CheckKind::ErrorVerification => "error_verification",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace([' ', '-'], "_").as_str() {
            "output_assertion" | "assertion" | "output" => Some(CheckKind::OutputAssertion),
            "resource_monitor" | "resource_monitoring" | "resource" => Some(CheckKind::ResourceMonitor),
            "error_verification" | "error" | "error_check" => Some(CheckKind::ErrorVerification),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanCheck {
    pub kind: CheckKind,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStage {
    pub title: String,
    pub kind: StageKind,
    pub actions: Vec<String>,
    pub checks: Vec<PlanCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproductionPlan {
    pub context_rank: usize,
    pub stages: Vec<PlanStage>,
    /// Numeric literals copied from the report's reproduction steps.
    pub params_echo: Vec<String>,
    /// Skeleton used because the model output was unusable.
    pub degraded: bool,
    /// Skeleton used because planning is disabled.
    pub skeleton: bool,
}

pub const STAGE_FORMAT: &str = "## Stage <n>: <title>
kind: environment_setup | data_preparation | model_setup | execution | verification
actions:
- <instruction>
checks:
- output_assertion | resource_monitor | error_verification: <description>";

/// Numeric literals in order of first appearance, e.g. `32` from `batch_size=32`.
pub fn numeric_literals<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let re = Regex::new(r"\b\d+(?:\.\d+)?(?:[eE][-+]?\d+)?\b").expect("static regex");
    let mut out: Vec<String> = Vec::new();
    for t in texts {
        for m in re.find_iter(t) {
            if !out.iter().any(|o| o == m.as_str()) {
                out.push(m.as_str().to_string());
            }
        }
    }
    out
}

pub fn parse_stages(text: &str) -> Result<Vec<PlanStage>, String> {
    let header = Regex::new(r"(?i)^\s*#*\s*\**\s*stage\s+(\d+)\s*\**\s*[:.)-]?\s*(.*?)\**\s*$").expect("static regex");
    let kind_line = Regex::new(r"(?i)^\s*[-*]?\s*kind\s*:\s*(.+?)\s*$").expect("static regex");
    let section = Regex::new(r"(?i)^\s*\**(actions|checks)\**\s*:\s*$").expect("static regex");
    let item = Regex::new(r"^\s*(?:[-*+]|\d+[.)])\s+(.+?)\s*$").expect("static regex");

    #[derive(PartialEq)]
    enum Part {
        None,
        Actions,
        Checks,
    }
    let mut stages: Vec<(String, Option<StageKind>, Vec<String>, Vec<PlanCheck>)> = Vec::new();
    let mut part = Part::None;
    for line in text.lines() {
        if let Some(c) = header.captures(line) {
            stages.push((c[2].trim().to_string(), None, Vec::new(), Vec::new()));
            part = Part::None;
            continue;
        }
        let Some(stage) = stages.last_mut() else { continue };
        if let Some(c) = kind_line.captures(line) {
            stage.1 = Some(StageKind::parse(&c[1]).ok_or_else(|| format!("unknown stage kind `{}`", &c[1]))?);
            continue;
        }
        if let Some(c) = section.captures(line) {
            part = if c[1].eq_ignore_ascii_case("actions") { Part::Actions } else { Part::Checks };
            continue;
        }
        let Some(c) = item.captures(line) else { continue };
        let entry = c[1].to_string();
        match part {
            Part::Actions => stage.2.push(entry),
            Part::Checks => {
                let (kind, desc) = entry
                    .split_once(':')
                    .and_then(|(k, d)| CheckKind::parse(k).map(|k| (k, d.trim().to_string())))
                    .ok_or_else(|| format!("check `{entry}` does not name a check kind"))?;
                stage.3.push(PlanCheck { kind, description: desc });
            }
            Part::None => {}
        }
    }
    Ok(stages
        .into_iter()
        .map(|(title, kind, actions, checks)| PlanStage {
            kind: kind.unwrap_or_else(|| StageKind::from_title(&title)),
            title,
            actions,
            checks,
        })
        .collect())
}

pub fn validate(stages: &[PlanStage]) -> Result<(), String> {
    if stages.len() < 3 {
        return Err(format!("plan has {} stages; at least 3 are required", stages.len()));
    }
    for required in [StageKind::EnvironmentSetup, StageKind::Execution, StageKind::Verification] {
        if !stages.iter().any(|s| s.kind == required) {
            return Err(format!("plan has no {} stage", required.as_str()));
        }
    }
    for (i, s) in stages.iter().enumerate() {
        if s.actions.is_empty() {
            return Err(format!("stage {} has no actions", i + 1));
        }
        if s.checks.is_empty() {
            return Err(format!("stage {} has no checks", i + 1));
        }
    }
    Ok(())
}

pub fn render_stages(stages: &[PlanStage]) -> String {
    let mut out = String::new();
    for (i, s) in stages.iter().enumerate() {
        let _ = writeln!(out, "## Stage {}: {}", i + 1, s.title);
        let _ = writeln!(out, "kind: {}", s.kind.as_str());
        out.push_str("actions:\n");
        for a in &s.actions {
            let _ = writeln!(out, "- {a}");
        }
        out.push_str("checks:\n");
        for c in &s.checks {
            let _ = writeln!(out, "- {}: {}", c.kind.as_str(), c.description);
        }
        out.push('\n');
    }
    out
}

impl ReproductionPlan {
    pub fn to_markdown(&self) -> String {
        let mut out = format!("# Reproduction plan for context {}\n\n", self.context_rank);
        if self.degraded {
            out.push_str("> Skeleton plan: the generated plan was unusable.\n\n");
        }
        let _ = writeln!(out, "params: {}\n", self.params_echo.join(", "));
        out.push_str(&render_stages(&self.stages));
        out
    }

    /// Setup, run and verify stages built from the report alone.
    pub fn skeleton(context_rank: usize, report: &RestructuredReport) -> Self {
        let mut run: Vec<String> = report.reproduction_steps.clone();
        if run.is_empty() {
            run.push("Run the code path described in the core problem".to_string());
        }
        let stages = vec![
            PlanStage {
                title: "Set up the environment".into(),
                kind: StageKind::EnvironmentSetup,
                actions: vec!["Import the libraries and seed all random generators from --seed".into()],
                checks: vec![PlanCheck {
                    kind: CheckKind::ErrorVerification,
                    description: "imports succeed".into(),
                }],
            },
            PlanStage {
                title: "Run the failing scenario".into(),
                kind: StageKind::Execution,
                actions: run,
                checks: vec![PlanCheck {
                    kind: CheckKind::OutputAssertion,
                    description: "PHASE and METRIC lines are printed".into(),
                }],
            },
            PlanStage {
                title: "Verify the symptom".into(),
                kind: StageKind::Verification,
                actions: vec![format!("Compare the outcome with: {}", first_line(&report.observed_behaviour))],
                checks: vec![PlanCheck {
                    kind: CheckKind::ErrorVerification,
                    description: "the reported error or metric deviation appears".into(),
                }],
            },
        ];
        Self {
            context_rank,
            stages,
            params_echo: numeric_literals(report.reproduction_steps.iter().map(String::as_str)),
            degraded: false,
            skeleton: true,
        }
    }
}

fn first_line(s: &str) -> &str {
    s.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim()
}

fn parse_valid(text: &str) -> Result<Vec<PlanStage>, String> {
    let stages = parse_stages(text)?;
    validate(&stages)?;
    Ok(stages)
}

pub fn generate_plan(
    context: &ReproductionContext,
    report: &RestructuredReport,
    complete: &dyn CompletionProvider,
) -> ReproductionPlan {
    let params = numeric_literals(report.reproduction_steps.iter().map(String::as_str));
    let params_text = if params.is_empty() { "(none)".to_string() } else { params.join(", ") };
    let user = prompts::fill(
        prompts::PLAN,
        &[
            ("format", STAGE_FORMAT),
            ("params", &params_text),
            ("report", &report.prompt_text()),
            ("context", &context.rendered),
        ],
    );
    let first = prompts::request(ModelRole::Code, task::PLAN, user);
    let finish = |stages: Vec<PlanStage>| ReproductionPlan {
        context_rank: context.rank,
        stages,
        params_echo: params.clone(),
        degraded: false,
        skeleton: false,
    };
    let degraded = || ReproductionPlan {
        degraded: true,
        skeleton: false,
        ..ReproductionPlan::skeleton(context.rank, report)
    };
    let answer = match complete.complete(&first) {
        Ok(a) => a,
        Err(e) => {
            tracing::warn!(rank = context.rank, error = %e, "plan generation failed; using skeleton");
            return degraded();
        }
    };
    let problem = match parse_valid(&answer) {
        Ok(stages) => return finish(stages),
        Err(p) => p,
    };
    let retry = prompts::follow_up(&first, &answer, prompts::repair(&problem, STAGE_FORMAT));
    match complete.complete(&retry).map(|a| parse_valid(&a)) {
        Ok(Ok(stages)) => finish(stages),
        _ => {
            tracing::warn!(rank = context.rank, problem = %problem, "plan unusable after repair; using skeleton");
            degraded()
        }
    }
}
