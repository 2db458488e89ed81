//! The run log vocabulary. Payloads carry everything needed to rebuild
//! state and nothing run-specific (no run id, paths, clocks or floats), so
//! two runs of one fixture hash identically.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::{Budgets, NoiseConfig, NoiseStage, RunMode};
use crate::coding::{AttemptMode, Suspicion};
use crate::error::{Error, Result};
use crate::hls::{SynthStatus, Violation};
use crate::level::CodeLevel;
use crate::patcher::sha256_hex;
use crate::provider::{Agent, Usage};
use crate::reflection::{ErrorHypothesis, Route};
use crate::sandbox::{CaseResult, CaseStatus};
use crate::understanding::{DecompositionPlan, SubFunctionSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStarted {
    pub target: String,
    pub doc_id: String,
    pub mode: RunMode,
    pub budgets: Budgets,
    pub noise: Option<NoiseConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionSummarized {
    pub section_id: String,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanAccepted {
    pub plan: DecompositionPlan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecAccepted {
    pub spec: SubFunctionSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodingAttempt {
    pub subfunction: String,
    pub level: CodeLevel,
    pub round: u32,
    pub attempt: u32,
    /// Absent when the reply could not be parsed into a unit.
    pub version: Option<u32>,
    pub mode: AttemptMode,
    pub passed: bool,
    pub suspicion: Suspicion,
    pub cases: Vec<CaseResult>,
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelAccepted {
    pub subfunction: String,
    pub level: CodeLevel,
    pub version: u32,
    pub round: u32,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelExhausted {
    pub subfunction: String,
    pub level: CodeLevel,
    pub round: u32,
    pub attempts: u32,
    pub suspicion: Suspicion,
    pub failing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderCall {
    pub agent: Agent,
    pub tag: String,
    pub fingerprint: String,
    pub response: String,
    pub usage: Usage,
    pub provider_id: String,
    pub transcript_entry: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PatchOrigin {
    Coding,
    Noise,
    Hls,
}

/// One definition committed into the integrated source of `level`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchApplied {
    pub level: CodeLevel,
    pub subfunction: String,
    pub body: String,
    /// Hash of the whole integrated source after the splice.
    pub content_hash: String,
    pub origin: PatchOrigin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionDecided {
    pub subfunction: String,
    pub level: CodeLevel,
    pub round: u32,
    pub decision: Route,
    pub justification: String,
    pub hypotheses: Vec<ErrorHypothesis>,
    /// Escalation forced by the reflection budget rather than chosen.
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionRequested {
    pub request_id: String,
    pub subfunction: Option<String>,
    pub level: Option<CodeLevel>,
    pub observations: String,
    pub attempts: String,
    pub questions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionAnswered {
    pub request_id: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptOptimized {
    pub subfunction: String,
    pub level: CodeLevel,
    pub skipped: bool,
    pub trigger_summary: String,
    pub new_addendum: Option<String>,
    pub revisions: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NoiseArtifact {
    /// Replaces the accepted dictionary.
    Spec { spec: SubFunctionSpec },
    /// Replaces the accepted unit; the PATCH_APPLIED that follows commits it.
    Unit { level: CodeLevel, version: u32, body: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseInjected {
    pub stage: NoiseStage,
    pub subfunction: String,
    pub artifact: NoiseArtifact,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HlsLinted {
    /// 0 for the initial lint, then one per optimization round.
    pub round: u32,
    pub clean: bool,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HlsRoundOutcome {
    Applied,
    BehaviorRegression,
    NoPatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HlsOptimized {
    pub round: u32,
    pub outcome: HlsRoundOutcome,
    pub patched: Vec<String>,
    /// Case ids that passed before the round and fail after it.
    pub regressions: Vec<String>,
    pub problems: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthInvoked {
    pub status: SynthStatus,
    pub exit_code: Option<i32>,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCompleted {
    /// `None` when there was nothing to verify against.
    pub correct: Option<bool>,
    pub total: u32,
    pub passed: u32,
    pub failures: Vec<CaseResult>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFailed {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Event {
    RunStarted(RunStarted),
    SectionSummarized(SectionSummarized),
    PlanAccepted(PlanAccepted),
    SpecAccepted(SpecAccepted),
    CodingAttempt(CodingAttempt),
    LevelAccepted(LevelAccepted),
    LevelExhausted(LevelExhausted),
    ProviderCall(ProviderCall),
    PatchApplied(PatchApplied),
    ReflectionDecided(ReflectionDecided),
    InterventionRequested(InterventionRequested),
    InterventionAnswered(InterventionAnswered),
    PromptOptimized(PromptOptimized),
    NoiseInjected(NoiseInjected),
    HlsLinted(HlsLinted),
    HlsOptimized(HlsOptimized),
    SynthInvoked(SynthInvoked),
    RunCompleted(RunCompleted),
    RunFailed(RunFailed),
}

pub const KINDS: [&str; 19] = [
    "RUN_STARTED",
    "SECTION_SUMMARIZED",
    "PLAN_ACCEPTED",
    "SPEC_ACCEPTED",
    "CODING_ATTEMPT",
    "LEVEL_ACCEPTED",
    "LEVEL_EXHAUSTED",
    "PROVIDER_CALL",
    "PATCH_APPLIED",
    "REFLECTION_DECIDED",
    "INTERVENTION_REQUESTED",
    "INTERVENTION_ANSWERED",
    "PROMPT_OPTIMIZED",
    "NOISE_INJECTED",
    "HLS_LINTED",
    "HLS_OPTIMIZED",
    "SYNTH_INVOKED",
    "RUN_COMPLETED",
    "RUN_FAILED",
];

fn first_line(s: &str, max: usize) -> String {
    let l = s.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim();
    if l.chars().count() > max {
        format!("{}…", l.chars().take(max).collect::<String>())
    } else {
        l.to_string()
    }
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::RunStarted(_) => "RUN_STARTED",
            Event::SectionSummarized(_) => "SECTION_SUMMARIZED",
            Event::PlanAccepted(_) => "PLAN_ACCEPTED",
            Event::SpecAccepted(_) => "SPEC_ACCEPTED",
            Event::CodingAttempt(_) => "CODING_ATTEMPT",
            Event::LevelAccepted(_) => "LEVEL_ACCEPTED",
            Event::LevelExhausted(_) => "LEVEL_EXHAUSTED",
            Event::ProviderCall(_) => "PROVIDER_CALL",
            Event::PatchApplied(_) => "PATCH_APPLIED",
            Event::ReflectionDecided(_) => "REFLECTION_DECIDED",
            Event::InterventionRequested(_) => "INTERVENTION_REQUESTED",
            Event::InterventionAnswered(_) => "INTERVENTION_ANSWERED",
            Event::PromptOptimized(_) => "PROMPT_OPTIMIZED",
            Event::NoiseInjected(_) => "NOISE_INJECTED",
            Event::HlsLinted(_) => "HLS_LINTED",
            Event::HlsOptimized(_) => "HLS_OPTIMIZED",
            Event::SynthInvoked(_) => "SYNTH_INVOKED",
            Event::RunCompleted(_) => "RUN_COMPLETED",
            Event::RunFailed(_) => "RUN_FAILED",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, Event::RunCompleted(_) | Event::RunFailed(_))
    }

    /// Splits into the logged `(kind, payload)` pair.
    pub fn to_parts(&self) -> Result<(String, Value)> {
        let v = serde_json::to_value(self)?;
        let payload = v.get("payload").cloned().unwrap_or(Value::Null);
        Ok((self.kind().to_string(), payload))
    }

    /// One line for trajectory digests.
    pub fn digest(&self) -> String {
        let k = self.kind();
        match self {
            Event::RunStarted(e) => format!("{k} target={} mode={:?}", e.target, e.mode),
            Event::SectionSummarized(e) => format!("{k} {}: {}", e.section_id, first_line(&e.summary, 120)),
            Event::PlanAccepted(e) => format!("{k} {}", e.plan.names().join(" → ")),
            Event::SpecAccepted(e) => format!("{k} {} rev{}: {}", e.spec.name, e.spec.revision, first_line(&e.spec.functionality, 160)),
            Event::CodingAttempt(e) => {
                let failing: Vec<&str> = e.cases.iter().filter(|c| c.status != CaseStatus::Pass).map(|c| c.id.as_str()).collect();
                let first_fail = e
                    .cases
                    .iter()
                    .find(|c| c.status != CaseStatus::Pass)
                    .map(|c| format!(" first-fail {} observed {}", c.id, first_line(&c.observed, 80)))
                    .unwrap_or_default();
                format!(
                    "{k} {} {} round {} attempt {} {} {} cases {}/{} suspicion {:?}{first_fail} failing [{}] {}",
                    e.subfunction,
                    e.level,
                    e.round,
                    e.attempt,
                    e.mode.as_str(),
                    if e.passed { "PASS" } else { "FAIL" },
                    e.cases.len() - failing.len(),
                    e.cases.len(),
                    e.suspicion,
                    failing.join(","),
                    first_line(&e.notes, 160)
                )
            }
            Event::LevelAccepted(e) => format!("{k} {} {} v{} after {} attempt(s)", e.subfunction, e.level, e.version, e.attempts),
            Event::LevelExhausted(e) => format!(
                "{k} {} {} round {} after {} attempts, suspicion {:?}, failing [{}]",
                e.subfunction,
                e.level,
                e.round,
                e.attempts,
                e.suspicion,
                e.failing.join(",")
            ),
            Event::ProviderCall(e) => format!("{k} {}/{}: {}", e.agent, e.tag, first_line(&e.response, 100)),
            Event::PatchApplied(e) => format!("{k} {} {} ({:?})", e.subfunction, e.level, e.origin),
            Event::ReflectionDecided(e) => format!(
                "{k} {} {} {}{}: {}",
                e.subfunction,
                e.level,
                e.decision.name(),
                match &e.decision {
                    Route::ReviseInstructions { target } | Route::RevisePrior { target } => format!(" {target}"),
                    _ => String::new(),
                },
                first_line(&e.justification, 160)
            ),
            Event::InterventionRequested(e) => format!("{k} {} {}", e.request_id, e.questions.join(" | ")),
            Event::InterventionAnswered(e) => format!("{k} {}: {}", e.request_id, first_line(&e.answer, 200)),
            Event::PromptOptimized(e) => format!("{k} {} {} revisions={} skipped={}", e.subfunction, e.level, e.revisions, e.skipped),
            Event::NoiseInjected(e) => format!("{k} {:?} {}", e.stage, e.subfunction),
            Event::HlsLinted(e) => format!("{k} round {} clean={} violations={}", e.round, e.clean, e.violations.len()),
            Event::HlsOptimized(e) => format!("{k} round {} {:?} [{}]", e.round, e.outcome, e.patched.join(",")),
            Event::SynthInvoked(e) => format!("{k} {:?} exit {:?}", e.status, e.exit_code),
            Event::RunCompleted(e) => format!("{k} correct={:?} {}/{}", e.correct, e.passed, e.total),
            Event::RunFailed(e) => format!("{k} {}: {}", e.code, first_line(&e.message, 200)),
        }
    }
}

/// Recursively key-sorted JSON text.
pub fn canonical_json(v: &Value) -> String {
    fn sort(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                let mut out = serde_json::Map::new();
                for k in keys {
                    out.insert(k.clone(), sort(&m[k]));
                }
                Value::Object(out)
            }
            Value::Array(a) => Value::Array(a.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    sort(v).to_string()
}

pub fn payload_hash(kind: &str, payload: &Value) -> String {
    sha256_hex(&canonical_json(&serde_json::json!({ "kind": kind, "payload": payload })))
}

/// One line of `events.log`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub seq: u64,
    pub timestamp: String,
    pub kind: String,
    pub payload: Value,
    pub payload_hash: String,
}

impl RunEvent {
    pub fn new(seq: u64, timestamp: String, event: &Event) -> Result<Self> {
        let (kind, payload) = event.to_parts()?;
        let payload_hash = payload_hash(&kind, &payload);
        Ok(RunEvent { seq, timestamp, kind, payload, payload_hash })
    }

    pub fn event(&self) -> Result<Event> {
        serde_json::from_value(serde_json::json!({ "kind": self.kind, "payload": self.payload }))
            .map_err(|e| Error::LogCorrupt(format!("seq {}: {} payload does not parse: {e}", self.seq, self.kind)))
    }

    pub fn to_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Parses and checks a log: gapless seq from 1, hashes match, kinds parse.
pub fn parse_log(text: &str) -> Result<Vec<RunEvent>> {
    let mut out: Vec<RunEvent> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ev: RunEvent =
            serde_json::from_str(line).map_err(|e| Error::LogCorrupt(format!("line {}: {e}", i + 1)))?;
        let want = out.len() as u64 + 1;
        if ev.seq != want {
            return Err(Error::LogCorrupt(format!("line {}: expected seq {want}, found {}", i + 1, ev.seq)));
        }
        if payload_hash(&ev.kind, &ev.payload) != ev.payload_hash {
            return Err(Error::LogCorrupt(format!("seq {}: payload hash mismatch", ev.seq)));
        }
        ev.event()?;
        out.push(ev);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Event {
        Event::InterventionAnswered(InterventionAnswered { request_id: "iv-1".into(), answer: "use table 2".into() })
    }

    #[test]
    fn round_trip_and_hash_ignores_timestamp() {
        let a = RunEvent::new(1, "2026-01-01T00:00:00Z".into(), &sample()).unwrap();
        let b = RunEvent::new(1, "2027-05-05T00:00:00Z".into(), &sample()).unwrap();
        assert_eq!(a.payload_hash, b.payload_hash);
        assert_eq!(a.event().unwrap(), sample());
        assert_eq!(a.kind, "INTERVENTION_ANSWERED");
    }

    #[test]
    fn log_checks() {
        let l1 = RunEvent::new(1, "t".into(), &sample()).unwrap().to_line().unwrap();
        let l2 = RunEvent::new(2, "t".into(), &sample()).unwrap().to_line().unwrap();
        let l3 = RunEvent::new(3, "t".into(), &sample()).unwrap().to_line().unwrap();
        assert_eq!(parse_log(&format!("{l1}\n{l2}\n")).unwrap().len(), 2);
        assert_eq!(parse_log(&format!("{l1}\n{l3}\n")).unwrap_err().code(), "LOG_CORRUPT");
        let tampered = l2.replace("use table 2", "use table 3");
        assert_eq!(parse_log(&format!("{l1}\n{tampered}\n")).unwrap_err().code(), "LOG_CORRUPT");
    }

    #[test]
    fn canonical_is_key_sorted() {
        let v: Value = serde_json::from_str(r#"{"b":1,"a":{"d":2,"c":3}}"#).unwrap();
        assert_eq!(canonical_json(&v), r#"{"a":{"c":3,"d":2},"b":1}"#);
    }

    #[test]
    fn kinds_table_matches_enum() {
        let e = sample();
        assert!(KINDS.contains(&e.kind()));
        assert_eq!(KINDS.len(), 19);
    }
}
