//! End-to-end runs of the NIB16 fixtures through the library API.

use std::path::PathBuf;

use hwforge_core::orchestrator::{self, RunConfig, RunEvent, RunStore, StepStatus};

fn fixture(name: &str) -> RunConfig {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/nib16").join(name);
    RunConfig::load(&p).unwrap()
}

fn kinds(log: &[RunEvent]) -> Vec<String> {
    log.iter().map(|e| e.kind.clone()).collect()
}

fn dump(log: &[RunEvent]) -> String {
    log.iter()
        .map(|e| {
            let mut p = e.payload.to_string();
            p.truncate(160);
            format!("{:>4} {} {}", e.seq, e.kind, p)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn drive_to_end(store: &RunStore, id: &str, answers: &[&str]) -> StepStatus {
    let mut answers = answers.iter();
    loop {
        let out = orchestrator::drive(store, id).unwrap();
        match out.status {
            StepStatus::Blocked { request_id } => {
                let a = answers.next().unwrap_or_else(|| panic!("unexpected block {request_id}"));
                orchestrator::answer(store, id, &request_id, a).unwrap();
            }
            s => return s,
        }
    }
}

#[test]
fn toy_run_completes_correctly() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let id = orchestrator::start_run(&store, &fixture("toy.toml")).unwrap();
    let status = drive_to_end(&store, &id, &[]);
    let (_, log) = orchestrator::read_state(&store, &id).unwrap();
    assert_eq!(status, StepStatus::Completed { correct: Some(true) }, "{}", dump(&log));
    assert!(!kinds(&log).contains(&"LEVEL_EXHAUSTED".to_string()));
}

#[test]
fn full_route_demo_completes_correctly() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let id = orchestrator::start_run(&store, &fixture("full_route_demo.toml")).unwrap();
    let status = drive_to_end(&store, &id, &["ROUTE: REGENERATE_CURRENT\nCombine state and round key with XOR (^), not OR."]);
    let (_, log) = orchestrator::read_state(&store, &id).unwrap();
    assert_eq!(status, StepStatus::Completed { correct: Some(true) }, "{}", dump(&log));
}

#[test]
fn noise_run_recovers() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let id = orchestrator::start_run(&store, &fixture("noise.toml")).unwrap();
    let status = drive_to_end(&store, &id, &[]);
    let (_, log) = orchestrator::read_state(&store, &id).unwrap();
    assert_eq!(status, StepStatus::Completed { correct: Some(true) }, "{}", dump(&log));
    assert!(kinds(&log).contains(&"NOISE_INJECTED".to_string()));
}

#[test]
fn single_shot_run_completes() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let id = orchestrator::start_run(&store, &fixture("single_shot.toml")).unwrap();
    let status = drive_to_end(&store, &id, &[]);
    let (_, log) = orchestrator::read_state(&store, &id).unwrap();
    assert_eq!(status, StepStatus::Completed { correct: Some(true) }, "{}", dump(&log));
}
