//! Seeded multi-trial execution of a reproduction script and the
//! explicit/silent verdicts computed from the trials.
//!
//! Scripts report through stdout lines `PHASE <setup|training|inference>` and
//! `METRIC <name> <value>`. Free-text `loss: x` and `accuracy: x` are picked
//! up as a fallback when no METRIC line names them.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MARGIN: f64 = 0.05;
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const DEFAULT_TRIAL_TIMEOUT: Duration = Duration::from_secs(300);
/// Tolerance used instead of a relative error when the reported value is 0.
pub const ZERO_TOLERANCE: f64 = 1e-6;
const TAIL_BYTES: u64 = 8192;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("sandbox failure: {0}")]
    Sandbox(String),
    #[error("signature {path}: {message}")]
    Signature { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BugKind {
    Explicit,
    Silent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Setup,
    Training,
    Inference,
}

impl Phase {
    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "setup" => Some(Phase::Setup),
            "training" | "train" => Some(Phase::Training),
            "inference" | "eval" | "evaluation" => Some(Phase::Inference),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugSignature {
    pub kind: BugKind,
    #[serde(default)]
    pub error_type: Option<String>,
    #[serde(default)]
    pub diagnostics: Vec<String>,
    #[serde(default)]
    pub phase: Option<Phase>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub failure_patterns: Vec<String>,
}

impl BugSignature {
    pub fn validate(&self) -> Result<(), String> {
        match self.kind {
            BugKind::Explicit if self.error_type.as_deref().is_none_or(|e| e.trim().is_empty()) => {
                Err("an explicit signature needs error_type".into())
            }
            BugKind::Silent if self.metrics.is_empty() => Err("a silent signature needs at least one metric".into()),
            _ => Ok(()),
        }
    }

    pub fn load(path: &Path) -> Result<Self, VerifyError> {
        let err = |message: String| VerifyError::Signature {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let sig: BugSignature = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        sig.validate().map_err(err)?;
        Ok(sig)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum ExitStatus {
    Exited { code: i32 },
    /// Terminated by a signal other than our own timeout kill.
    Killed,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub exit_status: ExitStatus,
    pub stdout_tail: String,
    pub stderr_tail: String,
    /// Last reported value per metric.
    pub parsed_metrics: BTreeMap<String, f64>,
    /// Every reported value per metric, in output order.
    pub metric_series: BTreeMap<String, Vec<f64>>,
    pub wall_time_ms: u64,
    pub phase_reached: Option<Phase>,
    /// Exception name from the last traceback on stderr.
    pub error_type: Option<String>,
}

impl TrialResult {
    /// Builds a result from captured output; used by the harness and by tests.
    pub fn from_output(seed: u64, exit_status: ExitStatus, stdout: &str, stderr: &str, wall_time_ms: u64) -> Self {
        let (parsed_metrics, metric_series) = parse_metrics(stdout);
        Self {
            seed,
            exit_status,
            stdout_tail: tail(stdout),
            stderr_tail: tail(stderr),
            parsed_metrics,
            metric_series,
            wall_time_ms,
            phase_reached: last_phase(stdout),
            error_type: exception_type(stderr),
        }
    }
}

fn tail(s: &str) -> String {
    let max = TAIL_BYTES as usize;
    if s.len() <= max {
        return s.to_string();
    }
    let mut start = s.len() - max;
    while !s.is_char_boundary(start) {
        start += 1;
    }
    s[start..].to_string()
}

fn regex(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("static regex"))
}

const FLOAT: &str = r"[-+]?(?:\d+\.?\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?|nan|inf|infinity)";

pub fn parse_metrics(stdout: &str) -> (BTreeMap<String, f64>, BTreeMap<String, Vec<f64>>) {
    static METRIC: OnceLock<Regex> = OnceLock::new();
    static LOSS: OnceLock<Regex> = OnceLock::new();
    static ACC: OnceLock<Regex> = OnceLock::new();
    let metric = regex(&METRIC, &format!(r"(?i)^\s*METRIC\s+(\S+)\s+({FLOAT})\s*$"));
    let loss = regex(&LOSS, &format!(r"(?i)\bloss\s*[:=]\s*({FLOAT})"));
    let acc = regex(&ACC, &format!(r"(?i)\bacc(?:uracy)?\s*[:=]\s*({FLOAT})"));

    let mut series: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut fallback: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for line in stdout.lines() {
        if let Some(c) = metric.captures(line) {
            if let Ok(v) = c[2].to_ascii_lowercase().parse::<f64>() {
                series.entry(c[1].to_string()).or_default().push(v);
            }
            continue;
        }
        for (name, re) in [("loss", loss), ("accuracy", acc)] {
            for c in re.captures_iter(line) {
                if let Ok(v) = c[1].to_ascii_lowercase().parse::<f64>() {
                    fallback.entry(name.to_string()).or_default().push(v);
                }
            }
        }
    }
    for (name, values) in fallback {
        series.entry(name).or_insert(values);
    }
    let last = series.iter().filter_map(|(k, v)| v.last().map(|x| (k.clone(), *x))).collect();
    (last, series)
}

fn last_phase(stdout: &str) -> Option<Phase> {
    static PHASE: OnceLock<Regex> = OnceLock::new();
    let re = regex(&PHASE, r"(?i)^\s*PHASE\s+(\w+)\s*$");
    stdout.lines().filter_map(|l| re.captures(l)).filter_map(|c| Phase::parse(&c[1])).next_back()
}

/// Name of the exception that ended the last traceback in `stderr`.
pub fn exception_type(stderr: &str) -> Option<String> {
    static EXC: OnceLock<Regex> = OnceLock::new();
    let re = regex(&EXC, r"^([A-Za-z_][\w.]*)(?::|$)");
    let start = stderr.rfind("Traceback (most recent call last):")?;
    stderr[start..]
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty() && !l.starts_with(char::is_whitespace))
        .find_map(|l| re.captures(l).map(|c| c[1].to_string()))
}

#[derive(Debug, Clone)]
pub struct SandboxConfig {
    pub python: String,
    pub timeout: Duration,
    /// Run trials concurrently. Only sensible for pure-crash signatures.
    pub parallel: bool,
    /// Extra environment for the trial processes.
    pub env: Vec<(String, String)>,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            python: "python3".into(),
            timeout: DEFAULT_TRIAL_TIMEOUT,
            parallel: false,
            env: Vec::new(),
        }
    }
}

fn read_tail(file: &mut File) -> String {
    let len = file.metadata().map(|m| m.len()).unwrap_or(0);
    let _ = file.seek(SeekFrom::Start(len.saturating_sub(TAIL_BYTES * 8)));
    let mut buf = Vec::new();
    let _ = file.read_to_end(&mut buf);
    String::from_utf8_lossy(&buf).into_owned()
}

/// One trial in a fresh working directory with a cleared environment.
pub fn run_trial(script: &str, seed: u64, sandbox: &SandboxConfig) -> Result<TrialResult, VerifyError> {
    let sandbox_err = |what: &str, e: std::io::Error| VerifyError::Sandbox(format!("{what}: {e}"));
    let dir = tempfile::Builder::new()
        .prefix(&format!("trial-{seed}-"))
        .tempdir()
        .map_err(|e| sandbox_err("creating trial directory", e))?;
    let script_path: PathBuf = dir.path().join("repro.py");
    fs::write(&script_path, script).map_err(|e| sandbox_err("writing script", e))?;
    let out_path = dir.path().join(".stdout");
    let err_path = dir.path().join(".stderr");
    let stdout = File::create(&out_path).map_err(|e| sandbox_err("creating stdout capture", e))?;
    let stderr = File::create(&err_path).map_err(|e| sandbox_err("creating stderr capture", e))?;

    let mut cmd = Command::new(&sandbox.python);
    cmd.arg("repro.py")
        .arg("--seed")
        .arg(seed.to_string())
        .current_dir(dir.path())
        .env_clear()
        .env("REPRO_SEED", seed.to_string())
        .env("PYTHONHASHSEED", seed.to_string())
        .env("PYTHONDONTWRITEBYTECODE", "1")
        .env("PYTHONUNBUFFERED", "1")
        .env("HOME", dir.path())
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr);
    if let Some(path) = std::env::var_os("PATH") {
        cmd.env("PATH", path);
    }
    for (k, v) in &sandbox.env {
        cmd.env(k, v);
    }

    let started = Instant::now();
    let mut child = cmd.spawn().map_err(|e| sandbox_err(&format!("spawning `{}`", sandbox.python), e))?;
    let exit_status = loop {
        match child.try_wait().map_err(|e| sandbox_err("waiting for trial", e))? {
            Some(status) => {
                break match status.code() {
                    Some(code) => ExitStatus::Exited { code },
                    None => ExitStatus::Killed,
                }
            }
            None if started.elapsed() >= sandbox.timeout => {
                let _ = child.kill();
                let _ = child.wait();
                break ExitStatus::Timeout;
            }
            None => std::thread::sleep(Duration::from_millis(10)),
        }
    };
    let wall_time_ms = started.elapsed().as_millis() as u64;
    let out = File::open(&out_path).map(|mut f| read_tail(&mut f)).unwrap_or_default();
    let err = File::open(&err_path).map(|mut f| read_tail(&mut f)).unwrap_or_default();
    tracing::debug!(seed, ?exit_status, wall_time_ms, "trial finished");
    Ok(TrialResult::from_output(seed, exit_status, &out, &err, wall_time_ms))
}

pub fn execute_trials(script: &str, seeds: &[u64], sandbox: &SandboxConfig) -> Result<Vec<TrialResult>, VerifyError> {
    if sandbox.parallel {
        seeds.par_iter().map(|&s| run_trial(script, s, sandbox)).collect()
    } else {
        seeds.iter().map(|&s| run_trial(script, s, sandbox)).collect()
    }
}

/// A named check for a behavioural failure pattern on one trial.
pub trait FailurePattern: Send + Sync {
    fn name(&self) -> &str;
    fn observed(&self, trial: &TrialResult) -> bool;
}

fn series_matching<'a>(trial: &'a TrialResult, needles: &'a [&str]) -> impl Iterator<Item = &'a Vec<f64>> {
    trial
        .metric_series
        .iter()
        .filter(move |(k, _)| {
            let k = k.to_ascii_lowercase();
            needles.iter().any(|n| k.contains(n))
        })
        .map(|(_, v)| v)
}

pub struct NanLoss;

impl FailurePattern for NanLoss {
    fn name(&self) -> &str {
        "nan_loss"
    }
    fn observed(&self, trial: &TrialResult) -> bool {
        series_matching(trial, &["loss"]).any(|s| s.iter().any(|v| !v.is_finite()))
    }
}

/// Memory metric whose last value exceeds its first by more than 10%.
pub struct MemoryGrowth;

impl FailurePattern for MemoryGrowth {
    fn name(&self) -> &str {
        "memory_growth"
    }
    fn observed(&self, trial: &TrialResult) -> bool {
        series_matching(trial, &["mem"]).any(|s| match (s.first(), s.last()) {
            (Some(&a), Some(&b)) if s.len() >= 2 => b > a * 1.1 && b > a,
            _ => false,
        })
    }
}

/// Loss ending above where it started, or accuracy ending below.
pub struct Degradation;

impl FailurePattern for Degradation {
    fn name(&self) -> &str {
        "degradation"
    }
    fn observed(&self, trial: &TrialResult) -> bool {
        let worse = |s: &Vec<f64>, rising_is_bad: bool| match (s.first(), s.last()) {
            (Some(&a), Some(&b)) if s.len() >= 2 && a.is_finite() && b.is_finite() => {
                if rising_is_bad {
                    b > a
                } else {
                    b < a
                }
            }
            _ => false,
        };
        series_matching(trial, &["loss"]).any(|s| worse(s, true)) || series_matching(trial, &["acc"]).any(|s| worse(s, false))
    }
}

/// Any other pattern: case-insensitive substring of the captured output.
pub struct Substring(pub String);

impl FailurePattern for Substring {
    fn name(&self) -> &str {
        &self.0
    }
    fn observed(&self, trial: &TrialResult) -> bool {
        let needle = self.0.to_lowercase();
        trial.stdout_tail.to_lowercase().contains(&needle) || trial.stderr_tail.to_lowercase().contains(&needle)
    }
}

pub fn pattern_for(name: &str) -> Box<dyn FailurePattern> {
    match name.trim().to_ascii_lowercase().replace([' ', '-'], "_").as_str() {
        "nan_loss" => Box::new(NanLoss),
        "memory_growth" => Box::new(MemoryGrowth),
        "degradation" => Box::new(Degradation),
        _ => Box::new(Substring(name.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationVerdict {
    pub reproduced: bool,
    pub kind: BugKind,
    pub evidence: BTreeMap<String, bool>,
    pub mean_metrics: BTreeMap<String, f64>,
    pub relative_errors: BTreeMap<String, f64>,
    pub seeds: Vec<u64>,
    pub margin: Option<f64>,
    pub trials: Vec<TrialResult>,
}

fn error_matches(observed: &str, expected: &str) -> bool {
    let last = |s: &str| s.rsplit('.').next().unwrap_or(s).to_string();
    observed == expected || last(observed) == last(expected)
}

pub fn verify_explicit(trials: &[TrialResult], signature: &BugSignature) -> VerificationVerdict {
    let expected = signature.error_type.as_deref().unwrap_or("");
    let type_ok = |t: &TrialResult| t.error_type.as_deref().is_some_and(|e| error_matches(e, expected));
    let diag_ok = |t: &TrialResult| {
        let err = t.stderr_tail.to_lowercase();
        signature.diagnostics.is_empty() || signature.diagnostics.iter().any(|d| err.contains(&d.to_lowercase()))
    };
    let phase_ok = |t: &TrialResult| signature.phase.is_none_or(|p| t.phase_reached == Some(p));

    let error_type_all = !trials.is_empty() && trials.iter().all(type_ok);
    let joint = trials.iter().any(|t| type_ok(t) && diag_ok(t) && phase_ok(t));
    let evidence = BTreeMap::from([
        ("error_type".to_string(), error_type_all),
        ("diagnostic".to_string(), trials.iter().any(diag_ok)),
        ("phase".to_string(), trials.iter().any(phase_ok)),
        ("joint_trial".to_string(), joint),
    ]);
    VerificationVerdict {
        reproduced: error_type_all && joint,
        kind: BugKind::Explicit,
        evidence,
        mean_metrics: BTreeMap::new(),
        relative_errors: BTreeMap::new(),
        seeds: trials.iter().map(|t| t.seed).collect(),
        margin: None,
        trials: trials.to_vec(),
    }
}

pub fn relative_error(mean: f64, reported: f64) -> f64 {
    if reported == 0.0 {
        mean.abs()
    } else {
        (mean - reported).abs() / reported.abs()
    }
}

fn within(mean: f64, reported: f64, margin: f64) -> bool {
    let e = relative_error(mean, reported);
    if reported == 0.0 {
        e <= ZERO_TOLERANCE
    } else {
        e <= margin
    }
}

pub fn verify_silent(trials: &[TrialResult], signature: &BugSignature, margin: f64) -> VerificationVerdict {
    let mut mean_metrics = BTreeMap::new();
    let mut relative_errors = BTreeMap::new();
    let mut evidence = BTreeMap::new();
    let mut metrics_ok = true;
    let mut missing = false;
    for (name, &reported) in &signature.metrics {
        let values: Vec<f64> = trials.iter().filter_map(|t| t.parsed_metrics.get(name).copied()).collect();
        if values.is_empty() {
            missing = true;
            metrics_ok = false;
            evidence.insert(format!("metric:{name}"), false);
            continue;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let ok = within(mean, reported, margin);
        metrics_ok &= ok;
        mean_metrics.insert(name.clone(), mean);
        relative_errors.insert(name.clone(), relative_error(mean, reported));
        evidence.insert(format!("metric:{name}"), ok);
    }
    let matchers: Vec<Box<dyn FailurePattern>> = signature.failure_patterns.iter().map(|p| pattern_for(p)).collect();
    let mut pattern_seen = false;
    for m in &matchers {
        let seen = trials.iter().any(|t| m.observed(t));
        evidence.insert(format!("pattern:{}", m.name()), seen);
        pattern_seen |= seen;
    }
    evidence.insert("metrics_within_margin".into(), metrics_ok);
    evidence.insert("failure_pattern".into(), pattern_seen);
    evidence.insert("missing_metric".into(), missing);
    VerificationVerdict {
        reproduced: metrics_ok && pattern_seen,
        kind: BugKind::Silent,
        evidence,
        mean_metrics,
        relative_errors,
        seeds: trials.iter().map(|t| t.seed).collect(),
        margin: Some(margin),
        trials: trials.to_vec(),
    }
}

pub fn verify(trials: &[TrialResult], signature: &BugSignature, margin: f64) -> VerificationVerdict {
    match signature.kind {
        BugKind::Explicit => verify_explicit(trials, signature),
        BugKind::Silent => verify_silent(trials, signature, margin),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TB: &str = "Traceback (most recent call last):\n  File \"repro.py\", line 3, in <module>\n    raise ValueError('shape mismatch: 3 vs 4')\nValueError: shape mismatch: 3 vs 4\n";

    #[test]
    fn exception_from_last_traceback() {
        assert_eq!(exception_type(TB).as_deref(), Some("ValueError"));
        let chained = format!("{TB}\nDuring handling of the above exception, another exception occurred:\n\n{}", TB.replace("ValueError", "torch.cuda.OutOfMemoryError"));
        assert_eq!(exception_type(&chained).as_deref(), Some("torch.cuda.OutOfMemoryError"));
        assert_eq!(exception_type("warning only"), None);
    }

    #[test]
    fn metric_lines_take_precedence_over_free_text() {
        let (last, series) = parse_metrics("PHASE training\nepoch 1 loss: 3.0\nMETRIC loss 2.5\nloss=9\nMETRIC accuracy 0.5\nMETRIC loss nan\n");
        assert!(last["loss"].is_nan());
        assert_eq!(series["loss"].len(), 2);
        assert_eq!(last["accuracy"], 0.5);
        let (last, _) = parse_metrics("step 3 | Loss = 1.25 | acc: 0.75");
        assert_eq!((last["loss"], last["accuracy"]), (1.25, 0.75));
    }

    #[test]
    fn zero_reported_value_uses_absolute_tolerance() {
        assert!(within(5e-7, 0.0, 0.05));
        assert!(!within(2e-6, 0.0, 0.05));
    }
}
