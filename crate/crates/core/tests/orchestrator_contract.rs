use std::fs;
use std::path::{Path, PathBuf};

use hwforge_core::orchestrator::store::{LogWriter, EVENTS_FILE};
use hwforge_core::orchestrator::{self, Phase, RunConfig, RunStore, StepStatus};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/nib16")
}

fn config(name: &str) -> RunConfig {
    RunConfig::load(&fixtures().join(name)).unwrap()
}

fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let dest = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_tree(&entry.path(), &dest);
        } else {
            fs::copy(entry.path(), dest).unwrap();
        }
    }
}

fn blocked_demo(store: &RunStore) -> (String, String) {
    let id = orchestrator::start_run(store, &config("full_route_demo.toml")).unwrap();
    match orchestrator::drive(store, &id).unwrap().status {
        StepStatus::Blocked { request_id } => (id, request_id),
        other => panic!("expected a block, got {other:?}"),
    }
}

fn log_text(store: &RunStore, id: &str) -> String {
    fs::read_to_string(store.run_dir(id).unwrap().join(EVENTS_FILE)).unwrap()
}

#[test]
fn zero_budget_is_rejected_before_a_run_exists() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let mut cfg = config("toy.toml");
    cfg.budgets.max_attempts_per_level = 0;
    let err = orchestrator::start_run(&store, &cfg).unwrap_err();
    assert_eq!(err.code(), "CONFIG_INVALID");
    assert!(store.list().unwrap_or_default().is_empty());
}

#[test]
fn two_starts_get_distinct_ids() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let a = orchestrator::start_run(&store, &config("toy.toml")).unwrap();
    let b = orchestrator::start_run(&store, &config("toy.toml")).unwrap();
    assert_ne!(a, b);
    assert_eq!(store.list().unwrap().len(), 2);
}

#[test]
fn stepping_a_blocked_run_is_refused_without_provider_calls() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let (id, rid) = blocked_demo(&store);
    let before = log_text(&store, &id);
    let err = orchestrator::step(&store, &id).unwrap_err();
    assert_eq!(err.code(), "BLOCKED_ON_INTERVENTION");
    assert_eq!(log_text(&store, &id), before, "nothing may be appended, PROVIDER_CALL included");
    let summary = orchestrator::summarize(&store, &id).unwrap();
    assert!(summary.pending_intervention);
    assert_eq!(summary.pending_request_id.as_deref(), Some(rid.as_str()));
    assert_eq!(summary.phase, Phase::Blocked);
}

#[test]
fn answers_are_accepted_once() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let (id, rid) = blocked_demo(&store);
    assert_eq!(orchestrator::answer(&store, &id, "iv-99", "x").unwrap_err().code(), "UNKNOWN_REQUEST");
    orchestrator::answer(&store, &id, &rid, "ROUTE: REGENERATE_CURRENT\nUse XOR.").unwrap();
    assert_eq!(orchestrator::answer(&store, &id, &rid, "again").unwrap_err().code(), "ALREADY_ANSWERED");
    let out = orchestrator::drive(&store, &id).unwrap();
    assert_eq!(out.status, StepStatus::Completed { correct: Some(true) });
}

#[test]
fn seq_gap_is_log_corrupt() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let id = orchestrator::start_run(&store, &config("toy.toml")).unwrap();
    orchestrator::step(&store, &id).unwrap();
    orchestrator::step(&store, &id).unwrap();
    let path = store.run_dir(&id).unwrap().join(EVENTS_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines.len() > 3);
    let gapped: String = lines.iter().enumerate().filter(|(i, _)| *i != 1).map(|(_, l)| format!("{l}\n")).collect();
    fs::write(&path, gapped).unwrap();
    assert_eq!(orchestrator::resume(&store, &id).unwrap_err().code(), "LOG_CORRUPT");
    assert_eq!(orchestrator::step(&store, &id).unwrap_err().code(), "LOG_CORRUPT");
}

#[test]
fn completed_runs_resume_terminal_and_refuse_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let id = orchestrator::start_run(&store, &config("toy.toml")).unwrap();
    assert_eq!(orchestrator::drive(&store, &id).unwrap().status, StepStatus::Completed { correct: Some(true) });
    let state = orchestrator::resume(&store, &id).unwrap();
    assert!(state.is_terminal());
    assert_eq!(state.phase, Phase::Completed);
    assert_eq!(orchestrator::step(&store, &id).unwrap_err().code(), "RUN_TERMINAL");
}

#[test]
fn a_second_writer_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let id = orchestrator::start_run(&store, &config("toy.toml")).unwrap();
    let dir = store.run_dir(&id).unwrap();
    let _held = LogWriter::open(&dir, &id).unwrap();
    assert_eq!(orchestrator::step(&store, &id).unwrap_err().code(), "CONCURRENT_WRITE");
}

#[test]
fn unknown_run_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    assert_eq!(orchestrator::step(&store, "nope").unwrap_err().code(), "UNKNOWN_RUN");
}

#[test]
fn nothing_to_verify_leaves_correctness_unknown() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = tmp.path().join("bundle");
    copy_tree(&fixtures().join("bundle"), &bundle);
    fs::remove_file(bundle.join("golden.json")).unwrap();
    let mut cfg = config("single_shot.toml");
    cfg.bundle = bundle;
    let store = RunStore::new(tmp.path().join("runs"));
    let id = orchestrator::start_run(&store, &cfg).unwrap();
    let out = orchestrator::drive(&store, &id).unwrap();
    assert_eq!(out.status, StepStatus::Completed { correct: None });
    assert_eq!(orchestrator::summarize(&store, &id).unwrap().metrics.correct, None);
}

#[test]
fn replay_reproduces_a_finished_run() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let id = orchestrator::start_run(&store, &config("toy.toml")).unwrap();
    orchestrator::drive(&store, &id).unwrap();
    let before = log_text(&store, &id);
    let report = orchestrator::replay(&store, &id).unwrap();
    assert_eq!(report.events, before.lines().count());
    assert_eq!(log_text(&store, &id), before);
}

#[test]
fn a_torn_trailing_line_is_dropped_on_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let reference = orchestrator::start_run(&store, &config("toy.toml")).unwrap();
    orchestrator::drive(&store, &reference).unwrap();

    let id = orchestrator::start_run(&store, &config("toy.toml")).unwrap();
    for _ in 0..3 {
        orchestrator::step(&store, &id).unwrap();
    }
    let path = store.run_dir(&id).unwrap().join(EVENTS_FILE);
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("{\"seq\":99,\"kind\":\"PROVIDER_CA");
    fs::write(&path, text).unwrap();
    assert_eq!(orchestrator::drive(&store, &id).unwrap().status, StepStatus::Completed { correct: Some(true) });

    assert_eq!(without_timestamps(&log_text(&store, &id)), without_timestamps(&log_text(&store, &reference)));
}

fn without_timestamps(log: &str) -> Vec<serde_json::Value> {
    log.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("timestamp");
            v
        })
        .collect()
}
