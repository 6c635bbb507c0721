//! The checked-in exchange logs must match what the fixture model produces
//! today. Set DLREPRO_REGEN_FIXTURES=1 to rewrite them after a prompt change.

mod common;

use std::fs;

use common::*;
use dlrepro_core::agent::OutcomeStatus;

fn corrupt(log: &str) -> String {
    let mut out = String::from("{\"digest\": \"not a record\"\n");
    for line in log.lines() {
        let cut = line.char_indices().nth(line.chars().count() / 2).map_or(0, |(i, _)| i);
        out.push_str(&line[..cut]);
        out.push('\n');
    }
    out
}

#[test]
fn recorded_exchanges_are_in_sync() {
    let out = tempfile::tempdir().unwrap();
    let logs = tempfile::tempdir().unwrap();
    let summary = record_exchanges(out.path(), logs.path());
    assert_eq!(summary.outcome.status, OutcomeStatus::Reproduced);
    let fresh = fs::read_to_string(log_path(logs.path())).unwrap();

    if std::env::var_os("DLREPRO_REGEN_FIXTURES").is_some() {
        fs::create_dir_all(exchanges()).unwrap();
        fs::create_dir_all(corrupted_exchanges()).unwrap();
        fs::write(log_path(&exchanges()), &fresh).unwrap();
        fs::write(log_path(&corrupted_exchanges()), corrupt(&fresh)).unwrap();
        return;
    }
    let stored = fs::read_to_string(log_path(&exchanges())).expect("run with DLREPRO_REGEN_FIXTURES=1 to create the log");
    assert!(stored == fresh, "exchange log is stale; rerun with DLREPRO_REGEN_FIXTURES=1");
    let corrupted = fs::read_to_string(log_path(&corrupted_exchanges())).unwrap();
    assert_eq!(corrupted, corrupt(&fresh));
}
