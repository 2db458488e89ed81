//! Random run logs and an independent metrics oracle that reads the raw
//! JSON lines instead of the typed events.

use std::collections::BTreeMap;

use hwforge_core::coding::{AttemptMode, Suspicion};
use hwforge_core::orchestrator::events::{
    CodingAttempt, InterventionAnswered, InterventionRequested, ProviderCall, RunCompleted, SectionSummarized,
};
use hwforge_core::orchestrator::{Event, RunEvent};
use hwforge_core::provider::{Agent, Usage};
use hwforge_core::CodeLevel;
use rand::Rng;
use serde_json::Value;

#[derive(Debug, PartialEq)]
pub struct Expected {
    pub correct: Option<bool>,
    pub n_interventions: u32,
    pub coding_attempts: BTreeMap<String, u32>,
    pub avg_coding: f64,
    pub prompt_chars: u64,
    pub completion_chars: u64,
}

/// Sums straight off the serialized log lines.
pub fn oracle(log: &[RunEvent]) -> Expected {
    let mut e = Expected {
        correct: None,
        n_interventions: 0,
        coding_attempts: BTreeMap::new(),
        avg_coding: 0.0,
        prompt_chars: 0,
        completion_chars: 0,
    };
    for line in log.iter().map(|ev| serde_json::to_string(ev).unwrap()) {
        let v: Value = serde_json::from_str(&line).unwrap();
        let p = &v["payload"];
        match v["kind"].as_str().unwrap() {
            "INTERVENTION_ANSWERED" => e.n_interventions += 1,
            "CODING_ATTEMPT" => *e.coding_attempts.entry(p["subfunction"].as_str().unwrap().to_string()).or_insert(0) += 1,
            "RUN_COMPLETED" => e.correct = p["correct"].as_bool(),
            "PROVIDER_CALL" => {
                e.prompt_chars += p["usage"]["prompt_chars"].as_u64().unwrap();
                e.completion_chars += p["usage"]["completion_chars"].as_u64().unwrap();
            }
            _ => {}
        }
    }
    let n = e.coding_attempts.len();
    if n > 0 {
        e.avg_coding = e.coding_attempts.values().map(|&c| c as f64).sum::<f64>() / n as f64;
    }
    e
}

fn attempt(sub: &str, n: u32) -> Event {
    Event::CodingAttempt(CodingAttempt {
        subfunction: sub.to_string(),
        level: CodeLevel::Script,
        round: 1,
        attempt: n,
        version: Some(n),
        mode: AttemptMode::Draft,
        passed: false,
        suspicion: Suspicion::Current,
        cases: vec![],
        notes: String::new(),
    })
}

fn requested(i: u32) -> Event {
    Event::InterventionRequested(InterventionRequested {
        request_id: format!("iv-{i}"),
        subfunction: None,
        level: None,
        observations: "o".into(),
        attempts: "a".into(),
        questions: vec!["q".into()],
    })
}

fn answered(i: u32) -> Event {
    Event::InterventionAnswered(InterventionAnswered { request_id: format!("iv-{i}"), answer: "go on".into() })
}

fn completed(correct: Option<bool>) -> Event {
    Event::RunCompleted(RunCompleted { correct, total: 1, passed: 1, failures: vec![], note: String::new() })
}

fn number(events: Vec<Event>) -> Vec<RunEvent> {
    events.iter().enumerate().map(|(i, e)| RunEvent::new(i as u64 + 1, "t".into(), e).unwrap()).collect()
}

/// A log with `attempts[i]` coding attempts on sub-function `i` and
/// `answered_n` answered interventions.
pub fn log_with(attempts: &[u32], answered_n: u32, correct: Option<bool>) -> Vec<RunEvent> {
    let mut evs = Vec::new();
    for (i, &n) in attempts.iter().enumerate() {
        for a in 1..=n {
            evs.push(attempt(&format!("F{i}"), a));
        }
    }
    for i in 1..=answered_n {
        evs.push(requested(i));
        evs.push(answered(i));
    }
    if correct.is_some() {
        evs.push(completed(correct));
    }
    number(evs)
}

pub fn random_log(rng: &mut impl Rng) -> Vec<RunEvent> {
    let subs = ["A", "B", "C", "D", "E", "F"];
    let len = rng.gen_range(0..120);
    let mut evs = Vec::new();
    let mut next_request = 1;
    for _ in 0..len {
        match rng.gen_range(0..6) {
            0 | 1 => evs.push(attempt(subs[rng.gen_range(0..subs.len())], rng.gen_range(1..11))),
            2 => {
                evs.push(requested(next_request));
                if rng.gen_bool(0.7) {
                    evs.push(answered(next_request));
                }
                next_request += 1;
            }
            3 => evs.push(Event::ProviderCall(ProviderCall {
                agent: Agent::ALL[rng.gen_range(0..Agent::ALL.len())],
                tag: "t".into(),
                fingerprint: "f".into(),
                response: "r".into(),
                usage: Usage { prompt_chars: rng.gen_range(0..5000), completion_chars: rng.gen_range(0..800) },
                provider_id: "scripted".into(),
                transcript_entry: None,
            })),
            _ => evs.push(Event::SectionSummarized(SectionSummarized { section_id: "s".into(), summary: "x".into() })),
        }
    }
    match rng.gen_range(0..4) {
        0 => evs.push(completed(Some(true))),
        1 => evs.push(completed(Some(false))),
        2 => evs.push(completed(None)),
        _ => {}
    }
    number(evs)
}
