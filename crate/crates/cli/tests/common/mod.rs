//! Shared fixture plumbing for the CLI integration and acceptance tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use dlrepro_core::gateway::mock::{HashEmbedder, JaccardScorer, ScriptedProvider};
use dlrepro_core::gateway::replay::{ExchangeMode, ExchangeStore, Recorded, LOG_FILE};
use dlrepro_core::gateway::{CompletionRequest, Gateway, GenerationParams};
use dlrepro_core::pipeline::{cmd_reproduce, EmbedderKind, ReproduceSummary, RunConfig, ScorerKind};
use dlrepro_core::prompts::task;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn project() -> PathBuf {
    fixtures().join("tinynet")
}

pub fn report() -> PathBuf {
    fixtures().join("report.md")
}

pub fn signature() -> PathBuf {
    fixtures().join("signature.json")
}

pub fn exchanges() -> PathBuf {
    fixtures().join("exchanges")
}

pub fn corrupted_exchanges() -> PathBuf {
    fixtures().join("exchanges_corrupted")
}

pub fn script(name: &str) -> String {
    std::fs::read_to_string(fixtures().join("scripts").join(name)).unwrap()
}

/// Run settings shared by every fixture run: local embedder and scorer,
/// built-in static checks, short trial timeout.
pub fn fixture_config(out: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.repo = project();
    c.report = report();
    c.out_dir = out.to_path_buf();
    c.provider.embedder = EmbedderKind::Hash;
    c.provider.scorer = ScorerKind::Jaccard;
    c.lint_command = Vec::new();
    c.trial_timeout_secs = 30;
    c
}

/// CLI flags equivalent to `fixture_config`.
pub fn fixture_flags(out: &Path) -> Vec<String> {
    vec![
        "--repo".into(),
        project().display().to_string(),
        "--report".into(),
        report().display().to_string(),
        "--out-dir".into(),
        out.display().to_string(),
        "--embedder".into(),
        "hash".into(),
        "--scorer".into(),
        "jaccard".into(),
        "--lint-command".into(),
        "".into(),
        "--timeout".into(),
        "30".into(),
    ]
}

pub fn dlrepro(args: &[String]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlrepro"))
        .args(args)
        .env("DLREPRO_LOG", "warn")
        .output()
        .expect("dlrepro binary runs")
}

const RESTRUCTURED: &str = "=== CORE_PROBLEM ===
Training the MLP crashes on the short final batch because the forward pass reshapes inputs with the configured batch size.
=== OBSERVED_BEHAVIOUR ===
ValueError: shape mismatch: cannot view 48 values as (32, 12)
=== EXPECTED_BEHAVIOUR ===
The short final batch is processed like any other and training continues.
=== REPRODUCTION_STEPS ===
1. Build a regression dataset with 100 samples and 12 features.
2. Iterate it with batch_size=32 and drop_last disabled.
3. Reshape every batch to (32, 12) in the forward pass.
";

const PLAN: &str = "## Stage 1: Environment
kind: environment_setup
actions:
- use the Python standard library only
checks:
- error_verification: the script imports without errors

## Stage 2: Data
kind: data_preparation
actions:
- draw 100 samples with 12 features from a seeded generator
checks:
- output_assertion: the last batch holds 4 samples

## Stage 3: Train
kind: execution
actions:
- iterate batches of 32 and reshape each to (32, 12)
checks:
- output_assertion: PHASE training is printed

## Stage 4: Verify
kind: verification
actions:
- let the exception propagate
checks:
- error_verification: ValueError mentioning shape mismatch is raised during training
";

fn fenced(code: &str) -> String {
    format!("```python\n{code}```\n")
}

fn user_text(r: &CompletionRequest) -> String {
    r.messages.iter().skip(1).map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
}

/// Scripted model for the fixture project. Generation is adversarial: the
/// first candidate crashes in the wrong place (only relevance feedback
/// catches it), the second fixes the bug instead of triggering it (only
/// runtime feedback catches it), every later one is the real reproduction.
pub fn adversarial_provider() -> ScriptedProvider {
    let generated = Arc::new(AtomicUsize::new(0));
    let candidates = [script("decoy_eval.py"), script("decoy_fixed.py"), script("repro.py")];
    ScriptedProvider::new(move |r| {
        let text = user_text(r);
        let answer = match r.task.as_str() {
            task::RESTRUCTURE => RESTRUCTURED.to_string(),
            task::PLAN => PLAN.to_string(),
            task::GENERATE => {
                let n = generated.fetch_add(1, Ordering::SeqCst);
                fenced(&candidates[n.min(2)])
            }
            task::RELEVANCE => {
                if text.contains("PHASE training") {
                    "VERDICT: relevant\nRATIONALE: the script drives the training loop over short batches.".into()
                } else {
                    "VERDICT: irrelevant\nRATIONALE: the script never trains; it fails in an evaluation helper.".into()
                }
            }
            task::RUNTIME_STATE => {
                if text.contains("drop_last = True") {
                    "OUTCOME: clean\nSIGNALS: loss values printed; training completes\nRATIONALE: the short batch is dropped.".into()
                } else {
                    "OUTCOME: crash\nSIGNALS: ValueError; shape mismatch\nRATIONALE: a reshape receives fewer values than it expects.".into()
                }
            }
            task::TAXONOMY => {
                if text.contains("outcome: crash") {
                    "CATEGORY: tensor_api.shape".into()
                } else {
                    "CATEGORY: training.loss_function".into()
                }
            }
            task::SYMPTOMS => {
                if text.contains("(tensor_api.shape)") {
                    "SCRIPT_SYMPTOMS: ValueError; shape mismatch\nREPORT_SYMPTOMS: ValueError; shape mismatch\nSIMILARITY: 0.92".into()
                } else {
                    "SCRIPT_SYMPTOMS: training completes\nREPORT_SYMPTOMS: ValueError; shape mismatch\nSIMILARITY: 0.10".into()
                }
            }
            other => panic!("unexpected task {other}"),
        };
        Ok(answer)
    })
}

pub fn local_gateway(completion: Arc<dyn dlrepro_core::gateway::CompletionProvider>, config: &RunConfig) -> Gateway {
    Gateway::new(
        completion,
        Arc::new(HashEmbedder::new(config.provider.hash_dim, config.provider.hash_seed)),
        Arc::new(JaccardScorer),
    )
}

/// Runs the fixture end to end against the adversarial model and records
/// every completion into `<log_dir>/exchanges.jsonl`.
pub fn record_exchanges(out: &Path, log_dir: &Path) -> ReproduceSummary {
    let config = fixture_config(out);
    let store = Arc::new(ExchangeStore::empty().with_sink(log_dir).unwrap());
    let recorded = Recorded::new(
        Some(adversarial_provider()),
        store,
        ExchangeMode::Record,
        GenerationParams::default(),
    );
    let gateway = local_gateway(Arc::new(recorded), &config);
    cmd_reproduce(&config, &gateway, None).unwrap()
}

pub fn log_path(dir: &Path) -> PathBuf {
    dir.join(LOG_FILE)
}

/// Trace with timestamps blanked.
pub fn normalized_trace(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            dlrepro_core::agent::strip_timestamps(&mut v);
            v.to_string()
        })
        .collect::<Vec<_>>()
        .join("\n")
}
