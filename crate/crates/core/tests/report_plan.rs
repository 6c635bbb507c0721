use std::collections::BTreeMap;

use proptest::prelude::*;

use dlrepro_core::context::{assemble_contexts, ModuleGroup, ReproductionContext};
use dlrepro_core::corpus::{ChunkId, ChunkKind, CodeChunk, LineSpan};
use dlrepro_core::gateway::mock::ScriptedProvider;
use dlrepro_core::plan::{generate_plan, numeric_literals, parse_stages, render_stages, validate, StageKind};
use dlrepro_core::prompts::task;
use dlrepro_core::report::{
    parse_sections, restructure, section_format, tracebacks, BugReport, Provenance, RestructuredReport,
};
use dlrepro_core::retrieval::ScoredSnippet;

const TB: &str = "Traceback (most recent call last):
  File \"train.py\", line 12, in <module>
    model(x)
  File \"model.py\", line 40, in forward
    x = x.view(32, 12)
ValueError: shape mismatch: cannot view 48 values as (32, 12)";

fn report(body: &str) -> BugReport {
    BugReport::new("r1", "MLP crashes on last batch", body).unwrap()
}

fn template(core: &str, observed: &str, expected: &str, steps: &[&str]) -> String {
    let steps: String = steps.iter().enumerate().map(|(i, s)| format!("{}. {s}\n", i + 1)).collect();
    format!(
        "=== CORE_PROBLEM ===\n{core}\n=== OBSERVED_BEHAVIOUR ===\n{observed}\n=== EXPECTED_BEHAVIOUR ===\n{expected}\n=== REPRODUCTION_STEPS ===\n{steps}"
    )
}

#[test]
fn explicit_steps_are_kept_verbatim() {
    let body = "Training fails.\n\nSteps to reproduce:\n1. create 100 samples\n2. use batch_size=32\n3. call train()\n\nThanks.";
    let answer = template("core", "it crashes", "it trains", &["something else entirely"]);
    let r = restructure(&report(body), &ScriptedProvider::constant(answer));
    assert_eq!(r.reproduction_steps, ["create 100 samples", "use batch_size=32", "call train()"]);
    assert_eq!(r.provenance.reproduction_steps, Provenance::Extracted);
    assert!(!r.degraded);
}

#[test]
fn traceback_survives_restructuring_verbatim() {
    let body = format!("The run dies.\n\n```\n{TB}\n```\n\nIt should not.");
    assert_eq!(tracebacks(&body), [TB]);
    // The model paraphrases the error; the verbatim trace is put back.
    let answer = template("reshape fails", "a ValueError about shapes", "training completes", &["run it"]);
    let r = restructure(&report(&body), &ScriptedProvider::constant(answer));
    assert!(r.observed_behaviour.contains(TB));
}

#[test]
fn well_formed_template_parses_to_its_fields() {
    let answer = template(
        "Reshape uses the configured batch size.",
        "ValueError on the final batch",
        "All batches are processed",
        &["load 100 samples", "iterate with batch size 32"],
    );
    // Oracle: the template fields as written above.
    let r = restructure(&report("The run dies on the last batch."), &ScriptedProvider::constant(answer.clone()));
    assert_eq!(r.core_problem, "Reshape uses the configured batch size.");
    assert_eq!(r.observed_behaviour, "ValueError on the final batch");
    assert_eq!(r.expected_behaviour, "All batches are processed");
    assert_eq!(r.reproduction_steps, ["load 100 samples", "iterate with batch size 32"]);
    assert_eq!(r.provenance.reproduction_steps, Provenance::Inferred);
    assert_eq!(parse_sections(&answer).unwrap()[0], r.core_problem);
}

#[test]
fn malformed_output_is_repaired_once_then_falls_back() {
    let body = format!("Broken.\n\n```\n{TB}\n```\n\nExpected: training finishes.");
    let provider = ScriptedProvider::constant("no sections at all");
    let r = restructure(&report(&body), &provider);
    assert_eq!(provider.calls_for(task::RESTRUCTURE).len(), 2);
    assert!(r.degraded);
    assert_eq!(r.core_problem, "MLP crashes on last batch");
    assert!(r.observed_behaviour.contains(TB));
    assert!(r.expected_behaviour.contains("Expected: training finishes."));
    assert!(r.reproduction_steps.is_empty());
    assert_eq!(r.provenance.reproduction_steps, Provenance::Inferred);

    let failing = ScriptedProvider::failing();
    let r = restructure(&report(&body), &failing);
    assert!(r.degraded);
    assert_eq!(failing.calls().len(), 1);
}

#[test]
fn repaired_answer_is_accepted() {
    let good = template("core", "observed", "expected", &["step"]);
    let n = std::sync::atomic::AtomicUsize::new(0);
    let provider = ScriptedProvider::new(move |_| {
        Ok(if n.fetch_add(1, std::sync::atomic::Ordering::SeqCst) == 0 {
            "=== CORE_PROBLEM ===\nonly one\n".to_string()
        } else {
            good.clone()
        })
    });
    let r = restructure(&report("body"), &provider);
    assert!(!r.degraded);
    assert_eq!(r.core_problem, "core");
    let calls = provider.calls();
    assert_eq!(calls.len(), 2);
    assert!(calls[1].prompt_text().contains("missing section"));
}

#[test]
fn markdown_report_carries_provenance() {
    let r = restructure(
        &report("Steps to reproduce:\n1. run train.py\n"),
        &ScriptedProvider::constant(template("the reshape ignores short batches", "o", "e", &["x"])),
    );
    let md = r.to_markdown();
    assert!(md.contains("## Reproduction steps (extracted)"));
    assert!(md.contains("## Core problem (inferred)"));
    assert!(section_format().lines().count() == 4);
}

#[test]
fn empty_body_is_rejected() {
    assert!(BugReport::new("x", "t", "  \n").is_err());
}

// ---- plans ----

const FOUR_STAGES: &str = "## Stage 1: Environment
kind: environment_setup
actions:
- install numpy
checks:
- error_verification: imports succeed

## Stage 2: Data
kind: data_preparation
actions:
- draw 100 samples with 12 features
checks:
- output_assertion: the last batch holds 4 rows

## Stage 3: Train
kind: execution
actions:
- iterate batches of 32
checks:
- resource_monitor: memory stays flat

## Stage 4: Verify
kind: verification
actions:
- let the exception propagate
checks:
- error_verification: ValueError is raised
";

fn context(rank: usize) -> ReproductionContext {
    let text = "def train():\n    pass\n";
    let snippet = ScoredSnippet {
        chunk: CodeChunk {
            id: ChunkId(format!("m{rank}.py#1")),
            file_path: format!("m{rank}.py"),
            span: LineSpan::new(1, 2),
            kind: ChunkKind::Function,
            text: text.into(),
            module_path: format!("m{rank}"),
            token_counts: BTreeMap::new(),
            degraded: false,
        },
        bm25_raw: 0.0,
        bm25_norm: 0.0,
        angular: 0.0,
        hybrid: 0.5,
        cross_score: None,
        unscored: false,
    };
    let group = ModuleGroup {
        module_id: format!("m{rank}"),
        members: vec![snippet],
        priority: 0.5,
    };
    let mut ctx = assemble_contexts(&[group], &[None], None, 6000).remove(0);
    ctx.rank = rank;
    ctx
}

fn structured(steps: &[&str]) -> RestructuredReport {
    let answer = template("core", "observed", "expected", steps);
    restructure(&report("body"), &ScriptedProvider::constant(answer))
}

#[test]
fn fixed_four_stage_plan_parses() {
    let plan = generate_plan(&context(1), &structured(&["run"]), &ScriptedProvider::constant(FOUR_STAGES));
    // Oracle: the fixture parsed directly.
    let direct = parse_stages(FOUR_STAGES).unwrap();
    assert_eq!(plan.stages, direct);
    assert_eq!(plan.stages.len(), 4);
    assert!(plan.stages.iter().all(|s| !s.checks.is_empty()));
    assert_eq!(plan.stages[1].kind, StageKind::DataPreparation);
    assert!(!plan.degraded);
}

#[test]
fn numeric_parameters_are_echoed() {
    let report = structured(&["create 100 samples", "train with batch_size=32 and lr=0.01"]);
    let plan = generate_plan(&context(1), &report, &ScriptedProvider::constant(FOUR_STAGES));
    assert!(plan.params_echo.iter().any(|p| p == "32"));
    assert_eq!(plan.params_echo, ["100", "32", "0.01"]);
}

#[test]
fn one_plan_per_context_in_rank_order() {
    let report = structured(&["run"]);
    let provider = ScriptedProvider::constant(FOUR_STAGES);
    let plans: Vec<_> = (1..=5).map(|r| generate_plan(&context(r), &report, &provider)).collect();
    assert_eq!(plans.iter().map(|p| p.context_rank).collect::<Vec<_>>(), [1, 2, 3, 4, 5]);
    assert_eq!(provider.calls_for(task::PLAN).len(), 5);
}

#[test]
fn invalid_plan_degrades_to_skeleton() {
    let provider = ScriptedProvider::constant("## Stage 1: Only\nkind: execution\nactions:\n- run\nchecks:\n- output_assertion: ok\n");
    let plan = generate_plan(&context(2), &structured(&["run with 8 workers"]), &provider);
    assert_eq!(provider.calls().len(), 2);
    assert!(plan.degraded);
    let kinds: Vec<_> = plan.stages.iter().map(|s| s.kind).collect();
    assert_eq!(kinds, [StageKind::EnvironmentSetup, StageKind::Execution, StageKind::Verification]);
    assert_eq!(plan.params_echo, ["8"]);
    validate(&plan.stages).unwrap();
}

#[test]
fn persisted_plan_round_trips() {
    let plan = generate_plan(&context(1), &structured(&["run"]), &ScriptedProvider::constant(FOUR_STAGES));
    let md = plan.to_markdown();
    assert_eq!(parse_stages(&md).unwrap(), plan.stages);
    assert_eq!(parse_stages(&render_stages(&plan.stages)).unwrap(), plan.stages);
}

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-z]{1,8}", 1..6).prop_map(|w| w.join(" "))
}

fn step() -> impl Strategy<Value = String> {
    (words(), prop::option::of(0u32..5000)).prop_map(|(w, n)| match n {
        Some(n) => format!("{w} {n}"),
        None => w,
    })
}

proptest! {
    #[test]
    fn rendered_report_restructures_identically(
        core in words(), observed in words(), expected in words(),
        steps in prop::collection::vec(step(), 1..5),
    ) {
        let refs: Vec<&str> = steps.iter().map(String::as_str).collect();
        let first = restructure(&report("body"), &ScriptedProvider::constant(template(&core, &observed, &expected, &refs)));
        let second = restructure(&report("body"), &ScriptedProvider::constant(first.render()));
        prop_assert_eq!(&first.core_problem, &second.core_problem);
        prop_assert_eq!(&first.observed_behaviour, &second.observed_behaviour);
        prop_assert_eq!(&first.expected_behaviour, &second.expected_behaviour);
        prop_assert_eq!(&first.reproduction_steps, &second.reproduction_steps);
    }

    #[test]
    fn step_numbers_come_from_the_body_or_are_inferred(
        body_steps in prop::option::of(prop::collection::vec(step(), 1..4)),
        model_steps in prop::collection::vec(step(), 1..4),
    ) {
        let body = match &body_steps {
            Some(s) => format!("It breaks.\n\nSteps to reproduce:\n{}", s.iter().map(|x| format!("- {x}\n")).collect::<String>()),
            None => "It breaks.".to_string(),
        };
        let refs: Vec<&str> = model_steps.iter().map(String::as_str).collect();
        let r = restructure(&report(&body), &ScriptedProvider::constant(template("c", "o", "e", &refs)));
        prop_assert!(r.reproduction_steps.iter().all(|s| !s.trim().is_empty()));
        if r.provenance.reproduction_steps == Provenance::Extracted {
            for n in numeric_literals(r.reproduction_steps.iter().map(String::as_str)) {
                prop_assert!(body.contains(&n), "{} not in body", n);
            }
        }
        for s in [&r.core_problem, &r.observed_behaviour, &r.expected_behaviour] {
            prop_assert!(!s.trim().is_empty());
        }
    }

    #[test]
    fn echo_contains_every_step_literal(steps in prop::collection::vec(step(), 1..5)) {
        let refs: Vec<&str> = steps.iter().map(String::as_str).collect();
        let plan = generate_plan(&context(1), &structured(&refs), &ScriptedProvider::constant(FOUR_STAGES));
        for s in &steps {
            if let Some(n) = s.split_whitespace().last().filter(|w| w.chars().all(|c| c.is_ascii_digit())) {
                prop_assert!(plan.params_echo.iter().any(|p| p == n));
            }
        }
    }
}
