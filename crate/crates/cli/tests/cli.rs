mod common;

use std::fs;
use std::path::Path;

use serde_json::Value;

use common::*;
use dlrepro_core::pipeline::{LOCK_FILE, TRACE_FILE, VERDICT_FILE};

fn replay_flags(out: &Path) -> Vec<String> {
    let mut f = fixture_flags(out);
    f.extend(["--replay".into(), exchanges().display().to_string()]);
    f
}

fn args(head: &[&str], tail: Vec<String>) -> Vec<String> {
    head.iter().map(|s| s.to_string()).chain(tail).collect()
}

fn stdout_json(out: &std::process::Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
    })
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn trace_events(out: &Path) -> Vec<Value> {
    fs::read_to_string(out.join(TRACE_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn replayed_reproduce_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let sig = signature().display().to_string();
    let run = dlrepro(&args(&["reproduce", "--signature", &sig], replay_flags(out)));
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let summary = stdout_json(&run);
    assert_eq!(summary["status"], "reproduced");
    assert_eq!(summary["reproduced"], true);
    for f in ["repro.py", "trace.jsonl", "outcome.json", "advisory.json", "report.structured.md", "contexts/contexts.json", "plans/plan_1.md"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert!(!out.join(LOCK_FILE).exists());

    let script = out.join("repro.py").display().to_string();
    let verify = dlrepro(&args(&["verify", "--script", &script, "--signature", &sig], replay_flags(out)));
    assert_eq!(verify.status.code(), Some(0), "{}", String::from_utf8_lossy(&verify.stderr));
    let v = stdout_json(&verify);
    assert_eq!(v["reproduced"], true);
    assert_eq!(v["evidence"]["error_type"], true);

    // The verdict file embeds the configuration it ran under.
    let file = read_json(&out.join(VERDICT_FILE));
    assert_eq!(file["config"]["margin"], 0.05);
    assert_eq!(file["config"]["seeds"], serde_json::json!([0, 1, 2, 3, 4]));
    assert_eq!(file["signature"]["error_type"], "ValueError");
}

#[test]
fn verify_reports_a_miss_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let fixed = dir.path().join("fixed.py");
    fs::write(&fixed, script("decoy_fixed.py")).unwrap();
    let out = dir.path().join("out");
    let run = dlrepro(&args(
        &["verify", "--script", &fixed.display().to_string(), "--signature", &signature().display().to_string()],
        fixture_flags(&out),
    ));
    assert_eq!(run.status.code(), Some(1), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(stdout_json(&run)["reproduced"], false);
}

#[test]
fn index_is_reused_when_nothing_changed() {
    let dir = tempfile::tempdir().unwrap();
    let first = stdout_json(&dlrepro(&args(&["index"], replay_flags(dir.path()))));
    let second = stdout_json(&dlrepro(&args(&["index"], replay_flags(dir.path()))));
    assert_eq!(first["reused"], false);
    assert_eq!(second["reused"], true);
    assert_eq!(first["index_key"], second["index_key"]);
    assert_eq!(first["chunks"], second["chunks"]);
}

#[test]
fn ablating_relevance_removes_its_feedback() {
    let dir = tempfile::tempdir().unwrap();
    let run = dlrepro(&args(&["ablate", "relevance"], replay_flags(dir.path())));
    assert!(run.status.code().is_some_and(|c| c <= 1), "{}", String::from_utf8_lossy(&run.stderr));
    let events = trace_events(dir.path());
    assert!(!events.is_empty());
    assert!(events.iter().all(|e| e["feedback"]["stage"] != "relevance"));
    let outcome = read_json(&dir.path().join("outcome.json"));
    assert_eq!(outcome["disabled_components"], serde_json::json!(["relevance"]));
}

#[test]
fn ablating_bm25_leaves_the_angular_score() {
    let dir = tempfile::tempdir().unwrap();
    dlrepro(&args(&["ablate", "bm25"], replay_flags(dir.path())));
    let retrieved = read_json(&dir.path().join("contexts/retrieval.json"));
    let rows = retrieved.as_array().unwrap();
    assert!(!rows.is_empty());
    for r in rows {
        assert_eq!(r["hybrid"].as_f64(), r["angular"].as_f64());
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, "margin = 0.2\nseeds = [7, 8]\ntop_k = 3\n").unwrap();
    let out = dir.path().join("out");
    let run = dlrepro(&args(&["reproduce", "--config", &config.display().to_string()], replay_flags(&out)));
    assert!(run.status.code().is_some_and(|c| c <= 1), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(read_json(&out.join("contexts/retrieval.json")).as_array().unwrap().len() <= 3);

    let repro = dir.path().join("repro.py");
    fs::write(&repro, script("repro.py")).unwrap();
    let run = dlrepro(&args(
        &[
            "verify",
            "--config",
            &config.display().to_string(),
            "--seeds",
            "1,2,3",
            "--script",
            &repro.display().to_string(),
            "--signature",
            &signature().display().to_string(),
        ],
        fixture_flags(&out),
    ));
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let file = read_json(&out.join(VERDICT_FILE));
    assert_eq!(file["config"]["margin"], 0.2);
    assert_eq!(file["config"]["seeds"], serde_json::json!([1, 2, 3]));
    assert_eq!(file["config"]["top_k"], 3);
    assert_eq!(file["seeds"], serde_json::json!([1, 2, 3]));
    assert_eq!(file["trials"].as_array().map(Vec::len), Some(3));
}

fn exit_code(extra: &[&str], out: &Path) -> (Option<i32>, String) {
    let mut flags = replay_flags(out);
    flags.extend(extra.iter().map(|s| s.to_string()));
    let run = dlrepro(&args(&["reproduce"], flags));
    (run.status.code(), String::from_utf8_lossy(&run.stderr).into_owned())
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = exit_code(&["--grammar", "cobol"], &dir.path().join("a"));
    assert_eq!(code, Some(3), "{err}");
    assert!(err.contains("cobol"));

    let out = dir.path().join("b");
    let mut flags: Vec<String> = replay_flags(&out);
    let at = flags.iter().position(|f| f == "--report").unwrap();
    flags[at + 1] = dir.path().join("missing.md").display().to_string();
    let run = dlrepro(&args(&["reproduce"], flags));
    assert_eq!(run.status.code(), Some(4), "{}", String::from_utf8_lossy(&run.stderr));

    let locked = dir.path().join("c");
    fs::create_dir_all(&locked).unwrap();
    fs::write(locked.join(LOCK_FILE), "1").unwrap();
    let (code, err) = exit_code(&[], &locked);
    assert_eq!(code, Some(7), "{err}");
    assert!(locked.join(LOCK_FILE).exists());

    let (code, _) = exit_code(&["--alpha", "1.5"], &dir.path().join("d"));
    assert_eq!(code, Some(2));
}

#[test]
fn unreachable_embedding_provider_exits_five() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, "[provider.http]\nmax_retries = 0\ntimeout_secs = 2\n").unwrap();
    let run = dlrepro(&[
        "index".into(),
        "--config".into(),
        config.display().to_string(),
        "--repo".into(),
        project().display().to_string(),
        "--out-dir".into(),
        dir.path().join("out").display().to_string(),
        "--embedder".into(),
        "http".into(),
        "--provider-url".into(),
        "http://127.0.0.1:9/v1".into(),
    ]);
    assert_eq!(run.status.code(), Some(5), "{}", String::from_utf8_lossy(&run.stderr));
}

#[test]
fn strict_replay_miss_is_not_a_live_call() {
    // An empty exchange directory: every completion misses, nothing is
    // contacted, and the run degrades instead of crashing.
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("none");
    fs::create_dir_all(&empty).unwrap();
    let out = dir.path().join("out");
    let mut flags = fixture_flags(&out);
    flags.extend(["--replay".into(), empty.display().to_string(), "--provider-url".into(), "http://127.0.0.1:9/v1".into()]);
    let run = dlrepro(&args(&["reproduce"], flags));
    assert_eq!(run.status.code(), Some(1), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(stdout_json(&run)["status"], "exhausted");
    assert!(fs::read_to_string(out.join("report.structured.md")).unwrap().contains("deterministic fallback"));
}
