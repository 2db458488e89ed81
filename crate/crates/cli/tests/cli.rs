use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

const ANSWER: &str = "ROUTE: REGENERATE_CURRENT\nCombine state and round key with XOR (^), not OR.";

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name).to_string_lossy().into_owned()
}

fn hwforge(runs: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hwforge")).arg("--runs-dir").arg(runs).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn only_run(runs: &Path) -> String {
    let mut ids: Vec<String> = std::fs::read_dir(runs).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert_eq!(ids.len(), 1, "{ids:?}");
    ids.pop().unwrap()
}

/// Parses `answer with: hwforge answer <run> <request> "<text>"`.
fn blocked_on(out: &str) -> (String, String) {
    let line = out.lines().find(|l| l.starts_with("answer with:")).expect("answer hint");
    let parts: Vec<&str> = line.split_whitespace().collect();
    (parts[4].to_string(), parts[5].to_string())
}

#[test]
fn toy_run_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = hwforge(tmp.path(), &["run", &fixture("nib16/toy.toml")]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("correct=true"));
}

#[test]
fn escalation_blocks_then_answer_and_resume_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let out = hwforge(tmp.path(), &["run", &fixture("nib16/full_route_demo.toml")]);
    assert_eq!(out.status.code(), Some(3));
    let text = stdout(&out);
    assert!(text.contains("question:"), "{text}");
    let (run, rid) = blocked_on(&text);

    assert_eq!(hwforge(tmp.path(), &["step", &run]).status.code(), Some(3));
    let unknown = hwforge(tmp.path(), &["answer", &run, "iv-404", "x"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("UNKNOWN_REQUEST"));

    assert_eq!(hwforge(tmp.path(), &["answer", &run, &rid, ANSWER]).status.code(), Some(0));
    let again = hwforge(tmp.path(), &["answer", &run, &rid, ANSWER]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("ALREADY_ANSWERED"));

    let done = hwforge(tmp.path(), &["resume", &run]);
    assert_eq!(done.status.code(), Some(0), "{}", stdout(&done));
    assert_eq!(hwforge(tmp.path(), &["replay", &run]).status.code(), Some(0));
}

#[test]
fn interactive_run_reads_the_answer_from_stdin() {
    let tmp = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_hwforge"))
        .arg("--runs-dir")
        .arg(tmp.path())
        .args(["run", &fixture("nib16/full_route_demo.toml"), "--interactive"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    writeln!(child.stdin.take().unwrap(), "{ANSWER}\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(hwforge(tmp.path(), &["run", "/no/such/config.toml"]).status.code(), Some(2));
    assert_eq!(hwforge(tmp.path(), &["run", &fixture("nib16/toy.toml"), "--bundle", "/no/such/bundle"]).status.code(), Some(2));
    assert_eq!(hwforge(tmp.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(hwforge(tmp.path(), &["step", "nope"]).status.code(), Some(1));
}

#[test]
fn metrics_has_one_row_per_run_in_id_order() {
    let tmp = tempfile::tempdir().unwrap();
    for cfg in ["toy.toml", "single_shot.toml", "toy.toml"] {
        assert_eq!(hwforge(tmp.path(), &["run", &fixture(&format!("nib16/{cfg}"))]).status.code(), Some(0));
    }
    let out = hwforge(tmp.path(), &["metrics"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3, "{text}");
    let ids: Vec<&str> = rows.iter().map(|r| r.split_whitespace().next().unwrap()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    for r in &rows {
        let cols: Vec<&str> = r.split_whitespace().collect();
        assert_eq!(cols[1], "true");
        assert_eq!(cols[2], "0");
        cols[3].parse::<f64>().unwrap();
    }

    let json: serde_json::Value = serde_json::from_slice(&hwforge(tmp.path(), &["metrics", "--json", ids[0]]).stdout).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 1);
    assert_eq!(json[0]["run_id"], ids[0]);
    assert_eq!(hwforge(tmp.path(), &["metrics", "zzz*"]).status.code(), Some(1));
}

#[test]
fn lint_reports_blocking_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let out = hwforge(tmp.path(), &["lint", &fixture("hls/recursion.cpp")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("recursion.cpp:7: BLOCKING HLS002"), "{}", stdout(&out));
}

#[test]
fn status_reports_a_blocked_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = hwforge(tmp.path(), &["run", &fixture("nib16/full_route_demo.toml")]);
    assert_eq!(out.status.code(), Some(3));
    let run = only_run(tmp.path());
    let status: serde_json::Value = serde_json::from_slice(&hwforge(tmp.path(), &["status", &run]).stdout).unwrap();
    assert_eq!(status["pending_intervention"], true);
}

#[test]
fn step_on_a_finished_run_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = hwforge(tmp.path(), &["run", &fixture("nib16/toy.toml")]);
    assert_eq!(out.status.code(), Some(0));
    let run = only_run(tmp.path());
    let again = hwforge(tmp.path(), &["step", &run]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("RUN_TERMINAL"));
}
