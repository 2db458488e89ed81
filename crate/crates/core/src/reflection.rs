//! Reflection after a level loop runs out of attempts: summarize the
//! trajectory, hypothesize where the fault lies, and pick one of four routes.
//!
//! Routes and human answers share one directive grammar:
//! `ROUTE: <REVISE_INSTRUCTIONS|REVISE_PRIOR|REGENERATE_CURRENT|ESCALATE_HUMAN> [target]`
//! on the first line, free text after it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orchestrator::events::Event;
use crate::patcher::is_identifier;
use crate::provider::{Agent, ChatMessage, CompletionRequest};
use crate::session::Session;
use crate::wire;

pub const DIGEST_BUDGET_CHARS: usize = 16_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "name", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Locus {
    Instructions,
    PriorSubfunction(String),
    Current,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorHypothesis {
    pub locus: Locus,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub completed_work: String,
    pub failure_focus: String,
    pub hypotheses: Vec<ErrorHypothesis>,
    /// Set when no hypothesis could be parsed and UNKNOWN was inserted.
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "route", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Route {
    ReviseInstructions { target: String },
    RevisePrior { target: String },
    RegenerateCurrent { feedback: String },
    EscalateHuman,
}

impl Route {
    pub fn name(&self) -> &'static str {
        match self {
            Route::ReviseInstructions { .. } => "REVISE_INSTRUCTIONS",
            Route::RevisePrior { .. } => "REVISE_PRIOR",
            Route::RegenerateCurrent { .. } => "REGENERATE_CURRENT",
            Route::EscalateHuman => "ESCALATE_HUMAN",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionDecision {
    pub route: Route,
    pub justification: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RequestStatus {
    Pending,
    Answered,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionRequest {
    pub request_id: String,
    pub subfunction: Option<String>,
    pub observations: String,
    pub attempts: String,
    pub questions: Vec<String>,
    pub created_at: String,
    pub status: RequestStatus,
    pub answer: Option<String>,
}

/// What the pipeline does with an operator's answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Directive {
    pub route: Option<Route>,
    pub guidance: String,
}

/// Who may be named as a route target or prior-fault locus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteScope {
    pub current: String,
    /// Sub-functions accepted at the current level (earlier in the plan).
    pub accepted: Vec<String>,
    /// Whether the current sub-function has an accepted higher level, so
    /// REVISE_PRIOR may name it to revisit that level.
    pub current_has_higher: bool,
}

impl RouteScope {
    fn prior_ok(&self, name: &str) -> bool {
        (name == self.current && self.current_has_higher) || (name != self.current && self.accepted.iter().any(|a| a == name))
    }

    fn instructions_ok(&self, name: &str) -> bool {
        name == self.current || self.accepted.iter().any(|a| a == name)
    }
}

/// One-line digest per event, newest first, within `budget` characters.
pub fn render_digest(events: &[Event], budget: usize) -> String {
    let mut out = String::new();
    for (i, ev) in events.iter().enumerate().rev() {
        let line = format!("#{} {}\n", i + 1, ev.digest());
        if out.len() + line.len() > budget {
            break;
        }
        out.push_str(&line);
    }
    out
}

fn parse_locus(token: &str, name: Option<&str>, scope: &RouteScope) -> Option<Locus> {
    match token {
        "INSTRUCTIONS" => Some(Locus::Instructions),
        "CURRENT" => Some(Locus::Current),
        "UNKNOWN" => Some(Locus::Unknown),
        "PRIOR_SUBFUNCTION" => {
            let n = name?;
            scope.prior_ok(n).then(|| Locus::PriorSubfunction(n.to_string()))
        }
        _ => None,
    }
}

const ANALYZER_SYSTEM: &str = "You review a code-generation trajectory that ran out of attempts. Reply with `COMPLETED: ...`, `FOCUS: ...`, and one or more `HYPOTHESIS: <INSTRUCTIONS|PRIOR_SUBFUNCTION <name>|CURRENT|UNKNOWN> | rationale` lines, most likely first.";

/// Analyzer call over the recent trajectory.
pub fn analyze_trajectory(
    s: &mut dyn Session,
    events: &[Event],
    scope: &RouteScope,
    level: &str,
    round: u32,
) -> Result<TrajectorySummary> {
    if !events.iter().any(|e| matches!(e, Event::LevelExhausted(_))) {
        return Err(Error::Precondition("trajectory holds no exhausted level loop".into()));
    }
    let user = format!(
        "{}\nAccepted sub-functions at this level: {}\n\nTrajectory (newest first):\n{}",
        wire::header(&[
            ("task", "analyze"),
            ("subfunction", &scope.current),
            ("level", level),
            ("round", &round.to_string()),
        ]),
        if scope.accepted.is_empty() { "(none)".to_string() } else { scope.accepted.join(", ") },
        render_digest(events, DIGEST_BUDGET_CHARS)
    );
    let request = CompletionRequest::new(Agent::Analyzer, "analyze", vec![ChatMessage::system(ANALYZER_SYSTEM), ChatMessage::user(user)]);
    let text = s.complete(request)?.text;
    let mut hypotheses = Vec::new();
    for line in text.lines() {
        let Some(rest) = line.trim().strip_prefix("HYPOTHESIS:") else { continue };
        let (head, rationale) = rest.split_once('|').unwrap_or((rest, ""));
        let mut toks = head.split_whitespace();
        let parsed = toks.next().and_then(|t| parse_locus(t, toks.next(), scope));
        match parsed {
            Some(locus) => hypotheses.push(ErrorHypothesis { locus, rationale: rationale.trim().to_string() }),
            None => tracing::warn!(line, "dropping unparseable hypothesis"),
        }
    }
    let fallback = hypotheses.is_empty();
    if fallback {
        hypotheses.push(ErrorHypothesis { locus: Locus::Unknown, rationale: "no valid hypothesis in analysis".into() });
    }
    Ok(TrajectorySummary {
        completed_work: wire::field(&text, "COMPLETED").unwrap_or_default().to_string(),
        failure_focus: wire::field(&text, "FOCUS").unwrap_or_default().to_string(),
        hypotheses,
        fallback,
    })
}

/// Parses the first line of a directive. `Ok(None)` means the text does not
/// start with a route line at all.
pub fn parse_directive(text: &str, scope: &RouteScope) -> std::result::Result<Option<(Route, String)>, String> {
    let mut lines = text.trim_start().lines();
    let Some(first) = lines.next() else { return Ok(None) };
    let Some(rest) = first.trim().strip_prefix("ROUTE:") else { return Ok(None) };
    let rest_text: String = lines.collect::<Vec<_>>().join("\n").trim().to_string();
    let mut toks = rest.split_whitespace();
    let route = toks.next().ok_or("ROUTE line names no route")?;
    let target = toks.next();
    if let Some(t) = target {
        if !is_identifier(t) {
            return Err(format!("`{t}` is not a sub-function name"));
        }
    }
    let route = match route {
        "REVISE_INSTRUCTIONS" => {
            let t = target.unwrap_or(&scope.current);
            if !scope.instructions_ok(t) {
                return Err(format!("REVISE_INSTRUCTIONS target `{t}` is neither current nor accepted"));
            }
            Route::ReviseInstructions { target: t.to_string() }
        }
        "REVISE_PRIOR" => {
            let t = target.ok_or("REVISE_PRIOR needs a target")?;
            if !scope.prior_ok(t) {
                return Err(format!("REVISE_PRIOR target `{t}` is not an accepted sub-function"));
            }
            Route::RevisePrior { target: t.to_string() }
        }
        "REGENERATE_CURRENT" => Route::RegenerateCurrent { feedback: rest_text.clone() },
        "ESCALATE_HUMAN" => Route::EscalateHuman,
        other => return Err(format!("unknown route `{other}`")),
    };
    Ok(Some((route, rest_text)))
}

const REFLECTOR_SYSTEM: &str = "You choose how to recover from a failed sub-function. First line: `ROUTE: REVISE_INSTRUCTIONS [name]`, `ROUTE: REVISE_PRIOR <name>`, `ROUTE: REGENERATE_CURRENT` or `ROUTE: ESCALATE_HUMAN`. Following lines: justification (for REGENERATE_CURRENT, the feedback for the coder).";

/// Reflector call; an invalid route gets one reprompt, then collapses to
/// ESCALATE_HUMAN.
pub fn decide_route(s: &mut dyn Session, summary: &TrajectorySummary, scope: &RouteScope, level: &str, round: u32) -> Result<ReflectionDecision> {
    let mut hyps = String::new();
    for h in &summary.hypotheses {
        let locus = match &h.locus {
            Locus::PriorSubfunction(n) => format!("PRIOR_SUBFUNCTION {n}"),
            other => serde_json::to_value(other).ok().and_then(|v| v["kind"].as_str().map(String::from)).unwrap_or_default(),
        };
        hyps.push_str(&format!("- {locus}: {}\n", h.rationale));
    }
    let mut problem: Option<String> = None;
    for pass in 0..2 {
        let round_s = round.to_string();
        let mut hdr = vec![("task", "decide-route"), ("subfunction", scope.current.as_str()), ("level", level), ("round", round_s.as_str())];
        if pass > 0 {
            hdr.push(("reprompt", ""));
        }
        let mut user = format!(
            "{}\nCompleted: {}\nFocus: {}\nHypotheses:\n{hyps}Accepted sub-functions: {}\n",
            wire::header(&hdr),
            summary.completed_work,
            summary.failure_focus,
            scope.accepted.join(", ")
        );
        if let Some(p) = &problem {
            user.push_str(&format!("\nYour previous answer was rejected: {p}\n"));
        }
        let request = CompletionRequest::new(Agent::Reflector, "decide-route", vec![ChatMessage::system(REFLECTOR_SYSTEM), ChatMessage::user(user)]);
        let text = s.complete(request)?.text;
        match parse_directive(&text, scope) {
            Ok(Some((route, justification))) => return Ok(ReflectionDecision { route, justification }),
            Ok(None) => problem = Some("the first line must be a ROUTE line".into()),
            Err(e) => problem = Some(e),
        }
    }
    Ok(ReflectionDecision {
        route: Route::EscalateHuman,
        justification: format!("no valid route after one reprompt ({})", problem.unwrap_or_default()),
    })
}

const INTERVENTION_SYSTEM: &str = "You ask a human engineer for help. Reply with `OBSERVATIONS: ...`, `ATTEMPTS: ...` and one or more `QUESTION: ...` lines.";

/// Request built without a provider call.
pub fn mechanical_request(request_id: &str, subfunction: Option<&str>, observations: String, attempts: String, question: String) -> InterventionRequest {
    InterventionRequest {
        request_id: request_id.to_string(),
        subfunction: subfunction.map(String::from),
        observations,
        attempts,
        questions: vec![question],
        created_at: String::new(),
        status: RequestStatus::Pending,
        answer: None,
    }
}

/// Asks the Reflector to phrase the escalation; a reply that cannot be
/// parsed falls back to a mechanical request built from the summary.
pub fn build_intervention_request(
    s: &mut dyn Session,
    request_id: &str,
    summary: &TrajectorySummary,
    decision: &ReflectionDecision,
    scope: &RouteScope,
    level: &str,
) -> Result<InterventionRequest> {
    if decision.route != Route::EscalateHuman {
        return Err(Error::Precondition("intervention requests need an ESCALATE_HUMAN decision".into()));
    }
    let hyps: String = summary.hypotheses.iter().map(|h| format!("- {:?}: {}\n", h.locus, h.rationale)).collect();
    let user = format!(
        "{}\nCompleted: {}\nFocus: {}\nHypotheses:\n{hyps}Why escalating: {}\n",
        wire::header(&[("task", "intervention"), ("subfunction", &scope.current), ("level", level), ("request", request_id)]),
        summary.completed_work,
        summary.failure_focus,
        decision.justification
    );
    let request = CompletionRequest::new(Agent::Reflector, "intervention", vec![ChatMessage::system(INTERVENTION_SYSTEM), ChatMessage::user(user)]);
    let text = s.complete(request)?.text;
    let questions: Vec<String> = text
        .lines()
        .filter_map(|l| l.trim().strip_prefix("QUESTION:").map(|q| q.trim().to_string()))
        .filter(|q| !q.is_empty())
        .collect();
    match (wire::field(&text, "OBSERVATIONS"), wire::field(&text, "ATTEMPTS")) {
        (Some(obs), Some(att)) if !questions.is_empty() => Ok(InterventionRequest {
            questions,
            ..mechanical_request(request_id, Some(&scope.current), obs.to_string(), att.to_string(), String::new())
        }),
        _ => Ok(mechanical_request(
            request_id,
            Some(&scope.current),
            format!("{} {}", summary.failure_focus, decision.justification).trim().to_string(),
            summary.completed_work.clone(),
            format!("`{}` keeps failing at {level}; which sub-function or instruction should be revisited?", scope.current),
        )),
    }
}

/// Marks the request answered and turns the answer into a directive. A
/// leading ROUTE line overrides the route; anything else is guidance for the
/// current sub-function.
pub fn apply_answer(request: &mut InterventionRequest, answer: &str, scope: &RouteScope) -> Result<Directive> {
    if request.status == RequestStatus::Answered {
        return Err(Error::AlreadyAnswered(request.request_id.clone()));
    }
    request.status = RequestStatus::Answered;
    request.answer = Some(answer.to_string());
    Ok(match parse_directive(answer, scope) {
        Ok(Some((Route::EscalateHuman, rest))) => Directive { route: None, guidance: rest },
        Ok(Some((route, rest))) => Directive { route: Some(route), guidance: rest },
        Ok(None) => Directive { route: None, guidance: answer.trim().to_string() },
        Err(e) => {
            tracing::warn!(error = %e, "ignoring invalid route directive in answer");
            Directive { route: None, guidance: answer.trim().to_string() }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coding::CodeLevel;
    use crate::orchestrator::events::LevelExhausted;
    use crate::provider::{parse_transcript, ScriptedProvider};
    use crate::sandbox::{LocalExecutor, Sandbox, Toolchain};
    use crate::session::MemorySession;

    fn scope() -> RouteScope {
        RouteScope { current: "Cipher".into(), accepted: vec!["SubBytes".into(), "ShiftRows".into()], current_has_higher: true }
    }

    fn session(transcript: &str) -> MemorySession {
        let p = ScriptedProvider::new(parse_transcript(transcript).unwrap());
        let dir = std::env::temp_dir().join("hwforge-reflection-unused");
        MemorySession::new(Box::new(p), Box::new(LocalExecutor::new(Sandbox::new(Toolchain::default()), dir)))
    }

    fn line(agent: &str, pats: &[&str], response: &str) -> String {
        serde_json::json!({"agent": agent, "match": pats, "response": response}).to_string() + "\n"
    }

    fn exhausted() -> Vec<Event> {
        vec![Event::LevelExhausted(LevelExhausted {
            subfunction: "Cipher".into(),
            level: CodeLevel::Synth,
            round: 1,
            attempts: 2,
            suspicion: crate::coding::Suspicion::PriorSubfunction,
            failing: vec!["Cipher-spec-1".into()],
        })]
    }

    #[test]
    fn hypotheses_parse_and_fallback() {
        let t = line(
            "Analyzer",
            &[],
            "COMPLETED: four units\nFOCUS: cipher output\nHYPOTHESIS: PRIOR_SUBFUNCTION SubBytes | sbox row\nHYPOTHESIS: BOGUS | x\nHYPOTHESIS: CURRENT | maybe",
        ) + &line("Analyzer", &[], "HYPOTHESIS: PRIOR_SUBFUNCTION Foo | nope");
        let mut s = session(&t);
        let sum = analyze_trajectory(&mut s, &exhausted(), &scope(), "SYNTH", 1).unwrap();
        assert_eq!(sum.hypotheses[0].locus, Locus::PriorSubfunction("SubBytes".into()));
        assert_eq!(sum.hypotheses.len(), 2);
        let sum = analyze_trajectory(&mut s, &exhausted(), &scope(), "SYNTH", 1).unwrap();
        assert!(sum.fallback);
        assert_eq!(sum.hypotheses, vec![ErrorHypothesis { locus: Locus::Unknown, rationale: "no valid hypothesis in analysis".into() }]);
        assert_eq!(analyze_trajectory(&mut s, &[], &scope(), "SYNTH", 1).unwrap_err().code(), "PRECONDITION_VIOLATED");
    }

    fn summary(locus: Locus) -> TrajectorySummary {
        TrajectorySummary { completed_work: "c".into(), failure_focus: "f".into(), hypotheses: vec![ErrorHypothesis { locus, rationale: "r".into() }], fallback: false }
    }

    #[test]
    fn routes() {
        let t = line("Reflector", &[], "ROUTE: REGENERATE_CURRENT\nswap the loop order");
        let d = decide_route(&mut session(&t), &summary(Locus::Current), &scope(), "SYNTH", 1).unwrap();
        assert_eq!(d.route, Route::RegenerateCurrent { feedback: "swap the loop order".into() });

        let t = line("Reflector", &[], "ROUTE: REVISE_PRIOR Foo") + &line("Reflector", &["@reprompt\n"], "ROUTE: REVISE_PRIOR Foo");
        let mut s = session(&t);
        let d = decide_route(&mut s, &summary(Locus::Current), &scope(), "SYNTH", 1).unwrap();
        assert_eq!((d.route, s.provider_calls()), (Route::EscalateHuman, 2));

        let t = line("Reflector", &[], "ROUTE: ESCALATE_HUMAN\nsource unclear");
        let d = decide_route(&mut session(&t), &summary(Locus::Unknown), &scope(), "SYNTH", 1).unwrap();
        assert_eq!(d.route, Route::EscalateHuman);
    }

    #[test]
    fn intervention_requests() {
        let dec = ReflectionDecision { route: Route::EscalateHuman, justification: "j".into() };
        let t = line("Reflector", &["@task intervention\n"], "OBSERVATIONS: section s3 says rotate left by 5 but the example rotates right\nATTEMPTS: two drafts\nQUESTION: Which is authoritative?")
            + &line("Reflector", &["@task intervention\n"], "garbled");
        let mut s = session(&t);
        let a = build_intervention_request(&mut s, "iv-1", &summary(Locus::Instructions), &dec, &scope(), "SCRIPT").unwrap();
        assert!(a.observations.contains("s3"));
        let b = build_intervention_request(&mut s, "iv-2", &summary(Locus::Unknown), &dec, &scope(), "SCRIPT").unwrap();
        assert!(b.questions[0].contains("which sub-function"));
        assert_ne!(a.request_id, b.request_id);
    }

    #[test]
    fn answers() {
        let mut r = mechanical_request("iv-1", None, "o".into(), "a".into(), "q".into());
        let d = apply_answer(&mut r, "the S-box table row 3 is authoritative", &scope()).unwrap();
        assert_eq!((d.route, r.status), (None, RequestStatus::Answered));
        assert_eq!(apply_answer(&mut r, "again", &scope()).unwrap_err().code(), "ALREADY_ANSWERED");

        let mut r = mechanical_request("iv-2", None, "o".into(), "a".into(), "q".into());
        let d = apply_answer(&mut r, "ROUTE: REVISE_PRIOR SubBytes\ncheck row F", &scope()).unwrap();
        assert_eq!(d.route, Some(Route::RevisePrior { target: "SubBytes".into() }));
        assert_eq!(d.guidance, "check row F");
    }
}
