use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdout, Command, Stdio};
use std::time::Duration;

use reqwest::StatusCode;
use serde_json::{json, Value};

const ANSWER: &str = "ROUTE: REGENERATE_CURRENT\nCombine state and round key with XOR (^), not OR.";

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/nib16").join(name)
}

struct Server {
    child: Child,
    _out: BufReader<ChildStdout>,
    base: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn serve(runs: &Path, extra: &[&str]) -> Server {
    let mut child = Command::new(env!("CARGO_BIN_EXE_hwforge"))
        .arg("--runs-dir")
        .arg(runs)
        .args(["serve", "--addr", "127.0.0.1:0"])
        .args(extra)
        .env_remove("HWFORGE_TOKEN")
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut out = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    out.read_line(&mut line).unwrap();
    let base = line.trim().strip_prefix("listening on ").expect("listening line").to_string();
    Server { child, _out: out, base }
}

fn cli(runs: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_hwforge")).arg("--runs-dir").arg(runs).args(args).output().unwrap()
}

/// A finished toy run and a run blocked on its escalation.
fn seeded(runs: &Path) -> (String, String) {
    assert_eq!(cli(runs, &["run", fixture("toy.toml").to_str().unwrap()]).status.code(), Some(0));
    let toy = std::fs::read_dir(runs).unwrap().next().unwrap().unwrap().file_name().to_string_lossy().into_owned();
    assert_eq!(cli(runs, &["run", fixture("full_route_demo.toml").to_str().unwrap()]).status.code(), Some(3));
    let demo = std::fs::read_dir(runs)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .find(|n| *n != toy)
        .unwrap();
    (toy, demo)
}

async fn get(base: &str, path: &str) -> (StatusCode, Value) {
    let r = reqwest::get(format!("{base}{path}")).await.unwrap();
    let status = r.status();
    (status, r.json().await.unwrap())
}

/// Parses an SSE body into (event, id, data) triples.
fn sse_frames(body: &str) -> Vec<(String, Option<u64>, String)> {
    body.split("\n\n")
        .filter(|f| !f.trim().is_empty())
        .map(|f| {
            let (mut ev, mut id, mut data) = (String::from("message"), None, String::new());
            for l in f.lines() {
                if let Some(v) = l.strip_prefix("event:") {
                    ev = v.trim().to_string();
                } else if let Some(v) = l.strip_prefix("id:") {
                    id = v.trim().parse().ok();
                } else if let Some(v) = l.strip_prefix("data:") {
                    data.push_str(v.trim_start());
                }
            }
            (ev, id, data)
        })
        .filter(|(_, _, d)| !d.is_empty())
        .collect()
}

#[tokio::test]
async fn read_only_endpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let (toy, demo) = seeded(tmp.path());
    let s = serve(tmp.path(), &[]);
    let b = &s.base;

    let (st, runs) = get(b, "/runs").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(runs["api_version"], 1);
    assert_eq!(runs["runs"].as_array().unwrap().len(), 2);

    let (st, run) = get(b, &format!("/runs/{toy}")).await;
    assert_eq!((st, run["api_version"].clone()), (StatusCode::OK, json!(1)));
    let (_, blocked) = get(b, &format!("/runs/{demo}")).await;
    assert_eq!(blocked["pending_intervention"], true);

    let (st, plan) = get(b, &format!("/runs/{toy}/plan")).await;
    assert_eq!(st, StatusCode::OK);
    assert!(plan["plan"].is_object() || plan["plan"].is_array());
    let (st, spec) = get(b, &format!("/runs/{toy}/specs/Cipher")).await;
    assert_eq!((st, spec["api_version"].clone()), (StatusCode::OK, json!(1)));
    let (st, src) = get(b, &format!("/runs/{toy}/source/SYNTH")).await;
    assert_eq!(st, StatusCode::OK);
    assert!(src["text"].as_str().unwrap().contains("Cipher"));
    let (st, _) = get(b, &format!("/runs/{toy}/source/VERILOG")).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, iv) = get(b, &format!("/runs/{demo}/interventions")).await;
    assert_eq!(st, StatusCode::OK);
    assert!(iv["pending"].is_string());

    for path in ["/runs/nope", "/runs/nope/plan", "/runs/nope/events", &format!("/runs/{toy}/specs/Nope"), "/elsewhere"] {
        let (st, body) = get(b, path).await;
        assert_eq!(st, StatusCode::NOT_FOUND, "{path}");
        assert_eq!(body["api_version"], 1, "{path}");
        assert!(body["error"]["code"].is_string(), "{path}");
    }

    let c = reqwest::Client::new();
    let r = c.post(format!("{b}/runs/{toy}/step")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::FORBIDDEN);
    let r = c.post(format!("{b}/runs")).json(&json!({"config_path": fixture("toy.toml")})).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::FORBIDDEN);
}

#[tokio::test]
async fn finished_run_streams_full_log_then_ends() {
    let tmp = tempfile::tempdir().unwrap();
    let (toy, _) = seeded(tmp.path());
    let s = serve(tmp.path(), &[]);
    let lines = std::fs::read_to_string(tmp.path().join(&toy).join("events.log")).unwrap().lines().count() as u64;

    let body = tokio::time::timeout(Duration::from_secs(20), async {
        reqwest::get(format!("{}/runs/{toy}/events", s.base)).await.unwrap().text().await.unwrap()
    })
    .await
    .expect("stream ends on a finished run");
    let frames = sse_frames(&body);
    let events: Vec<_> = frames.iter().filter(|f| f.0 == "run_event").collect();
    assert_eq!(events.len() as u64, lines);
    for (i, (_, id, data)) in events.iter().enumerate() {
        assert_eq!(*id, Some(i as u64 + 1));
        let v: Value = serde_json::from_str(data).unwrap();
        assert_eq!(v["seq"], i as u64 + 1);
        assert_eq!(v["api_version"], 1);
    }
    assert_eq!(frames.last().unwrap().0, "end");

    let tail = reqwest::get(format!("{}/runs/{toy}/events?from={}", s.base, lines - 2)).await.unwrap().text().await.unwrap();
    let ids: Vec<u64> = sse_frames(&tail).iter().filter_map(|f| f.1).collect();
    assert_eq!(ids, vec![lines - 2, lines - 1, lines]);

    let resumed = reqwest::Client::new()
        .get(format!("{}/runs/{toy}/events", s.base))
        .header("Last-Event-ID", (lines - 1).to_string())
        .send()
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    let ids: Vec<u64> = sse_frames(&resumed).iter().filter_map(|f| f.1).collect();
    assert_eq!(ids, vec![lines]);
}

#[tokio::test]
async fn concurrent_answers_have_one_winner() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, demo) = seeded(tmp.path());
    let s = serve(tmp.path(), &[]);
    let (_, iv) = get(&s.base, &format!("/runs/{demo}/interventions")).await;
    let rid = iv["pending"].as_str().unwrap().to_string();

    let c = reqwest::Client::new();
    let url = format!("{}/runs/{demo}/interventions/{rid}/answer", s.base);
    let sends = (0..6).map(|_| c.post(&url).json(&json!({"answer": ANSWER})).send());
    let statuses: Vec<StatusCode> = futures_join(sends).await;
    assert_eq!(statuses.iter().filter(|s| **s == StatusCode::OK).count(), 1, "{statuses:?}");
    assert_eq!(statuses.iter().filter(|s| **s == StatusCode::CONFLICT).count(), 5, "{statuses:?}");

    let r = c.post(format!("{}/runs/{demo}/interventions/iv-404/answer", s.base)).json(&json!({"answer": "x"})).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    let body: Value = r.json().await.unwrap();
    assert_eq!(body["error"]["code"], "UNKNOWN_REQUEST");

    // The read-only server left the run for the CLI to continue.
    assert_eq!(cli(tmp.path(), &["resume", &demo]).status.code(), Some(0));
}

async fn futures_join<F>(futs: impl Iterator<Item = F>) -> Vec<StatusCode>
where
    F: std::future::Future<Output = reqwest::Result<reqwest::Response>> + Send + 'static,
{
    let handles: Vec<_> = futs.map(tokio::spawn).collect();
    let mut out = Vec::new();
    for h in handles {
        out.push(h.await.unwrap().unwrap().status());
    }
    out
}

#[tokio::test]
async fn driving_server_runs_to_completion() {
    let tmp = tempfile::tempdir().unwrap();
    let s = serve(tmp.path(), &["--drive"]);
    let c = reqwest::Client::new();

    let r = c.post(format!("{}/runs", s.base)).json(&json!({"config_path": fixture("full_route_demo.toml")})).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::CREATED);
    let id = r.json::<Value>().await.unwrap()["run_id"].as_str().unwrap().to_string();

    let rid = loop {
        let (_, iv) = get(&s.base, &format!("/runs/{id}/interventions")).await;
        if let Some(r) = iv["pending"].as_str() {
            break r.to_string();
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    };
    // Blocked runs refuse to step.
    let r = c.post(format!("{}/runs/{id}/step", s.base)).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);

    let r = c.post(format!("{}/runs/{id}/interventions/{rid}/answer", s.base)).json(&json!({"answer": ANSWER})).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);

    // The live tail follows the driver until the run ends.
    let body = tokio::time::timeout(Duration::from_secs(60), async {
        c.get(format!("{}/runs/{id}/events", s.base)).send().await.unwrap().text().await.unwrap()
    })
    .await
    .expect("stream ends when the run completes");
    let frames = sse_frames(&body);
    let last = frames.iter().rev().find(|f| f.0 == "run_event").unwrap();
    let v: Value = serde_json::from_str(&last.2).unwrap();
    assert_eq!(v["kind"], "RUN_COMPLETED");
    assert_eq!(v["payload"]["correct"], true);

    let r = c.post(format!("{}/runs", s.base)).json(&json!({"config_path": "/no/such.toml"})).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn bearer_token_is_enforced() {
    let tmp = tempfile::tempdir().unwrap();
    let s = serve(tmp.path(), &["--token", "s3cret"]);
    let c = reqwest::Client::new();
    let r = c.get(format!("{}/runs", s.base)).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);
    assert_eq!(r.json::<Value>().await.unwrap()["api_version"], 1);
    let r = c.get(format!("{}/runs", s.base)).bearer_auth("wrong").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);
    let r = c.get(format!("{}/runs", s.base)).bearer_auth("s3cret").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
}
