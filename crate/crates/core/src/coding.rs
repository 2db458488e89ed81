//! Progressive coding: each sub-function is lowered PSEUDO → SCRIPT → SYNTH
//! by a Coder/Verifier loop.
//!
//! PSEUDO is accepted by self-validation only. SCRIPT runs the cases the
//! Verifier extracts from the document. SYNTH reuses those and adds cases
//! whose expected values come from executing the accepted SCRIPT code — the
//! provider only ever proposes inputs for those.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use crate::level::CodeLevel;

use crate::document::{render_context, SpecDocument};
use crate::error::{Error, Result};
use crate::orchestrator::events::{CodingAttempt, Event, PromptOptimized};
use crate::patcher::{apply_patch, parse_patch, sha256_hex, IntegratedSource, PatchBlock, FENCE_LEN, NAME_LABEL};
use crate::provider::{Agent, ChatMessage, CompletionRequest};
use crate::sandbox::{execute_cases, parse_literal, run_testcases, CaseResult, CaseStatus, EntrySignature, HarnessCase};
use crate::session::Session;
use crate::understanding::SubFunctionSpec;
use crate::wire;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitRef {
    pub level: CodeLevel,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeUnit {
    pub subfunction: String,
    pub level: CodeLevel,
    pub source_text: String,
    pub version: u32,
    pub derived_from: Option<UnitRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TestOrigin {
    Spec,
    HigherLevel,
    Human,
}

/// The executable unit that produced a case's expected values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleRef {
    pub level: CodeLevel,
    pub version: u32,
    pub source_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    pub level: CodeLevel,
    pub inputs: Vec<String>,
    pub expected: Vec<String>,
    pub origin: TestOrigin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleRef>,
    /// Function to call when it differs from the suite's sub-function.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry: Option<String>,
}

/// Persisted form of a sub-function's cases at one level, together with the
/// oracle sources needed to re-check HIGHER_LEVEL expectations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSuite {
    pub subfunction: String,
    pub level: CodeLevel,
    pub spec_revision: u32,
    pub cases: Vec<TestCase>,
    #[serde(default)]
    pub oracles: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Suspicion {
    Current,
    PriorSubfunction,
    Instructions,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptMode {
    Draft,
    Revise,
    Regenerate,
}

impl AttemptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttemptMode::Draft => "draft",
            AttemptMode::Revise => "revise",
            AttemptMode::Regenerate => "regenerate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub passed: bool,
    pub case_results: Vec<CaseResult>,
    pub suspicion: Suspicion,
    pub notes: String,
    /// How the next attempt should proceed if this one failed.
    pub next_mode: AttemptMode,
}

impl VerificationReport {
    fn rejected(notes: String) -> Self {
        VerificationReport {
            passed: false,
            case_results: Vec::new(),
            suspicion: Suspicion::Current,
            notes,
            next_mode: AttemptMode::Regenerate,
        }
    }

    pub fn failing_ids(&self) -> Vec<&str> {
        self.case_results.iter().filter(|c| c.status != CaseStatus::Pass).map(|c| c.id.as_str()).collect()
    }

    /// Multi-line human-readable account of the failures.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for c in self.case_results.iter().filter(|c| c.status != CaseStatus::Pass) {
            out.push_str(&format!("{} {:?}: observed {}\n", c.id, c.status, c.observed));
        }
        if !self.notes.is_empty() {
            out.push_str(&self.notes);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizerRevision {
    pub trigger_summary: String,
    pub new_addendum: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptState {
    pub base_prompt: String,
    pub per_subfunction_addendum: String,
    pub optimizer_revisions: Vec<OptimizerRevision>,
}

pub const CODER_BASE_PROMPT: &str = "You implement exactly one sub-function at the requested abstraction level. Reply with the complete definition between two lines of exactly 20 asterisks; the first line inside the fence is `SUBFUNCTION: <name>`. Do not emit other functions.";

impl Default for PromptState {
    fn default() -> Self {
        PromptState {
            base_prompt: CODER_BASE_PROMPT.to_string(),
            per_subfunction_addendum: String::new(),
            optimizer_revisions: Vec::new(),
        }
    }
}

/// Call signature derived from the dictionary's port declarations.
pub fn signature_of(spec: &SubFunctionSpec) -> EntrySignature {
    EntrySignature {
        name: spec.name.clone(),
        inputs: spec.inputs.len(),
        outputs_hex: spec.outputs.iter().map(|p| p.is_bit_width()).collect(),
    }
}

fn level_instructions(level: CodeLevel, name: &str) -> String {
    match level {
        CodeLevel::Pseudo => format!(
            "Write structured pseudocode: a block opening with `FUNCTION {name}(<params>)` and closing with `END FUNCTION`."
        ),
        CodeLevel::Script => format!(
            "Write a Python 3 function `def {name}(...)` over plain integers. It may call previously implemented sub-functions; return a tuple when there are several outputs."
        ),
        CodeLevel::Synth => format!(
            "Write a C++17 function `{name}` suitable for high-level synthesis: fixed-width <cstdint> types, no dynamic memory, no recursion, no I/O. It may call previously implemented sub-functions."
        ),
    }
}

pub struct DraftContext<'a> {
    pub higher: Option<&'a CodeUnit>,
    /// Integrated source at this level the draft is spliced into.
    pub integrated: &'a IntegratedSource,
    pub prompt: &'a PromptState,
    pub attempt: u32,
    pub round: u32,
    pub mode: AttemptMode,
    /// Previous unit and what was wrong with it (revise mode).
    pub previous: Option<(&'a CodeUnit, String)>,
    /// Reflection feedback and operator guidance, oldest first.
    pub feedback: &'a [String],
    pub version: u32,
}

fn protocol_reminder(name: &str) -> String {
    format!(
        "Reply again using the marker protocol: a line of exactly {FENCE_LEN} asterisks, a line `{NAME_LABEL} {name}`, the single definition of `{name}`, and a closing line of exactly {FENCE_LEN} asterisks."
    )
}

/// Asks the Coder for one unit and splices it into a copy of the integrated
/// source. A marker-protocol violation gets one reprompt.
pub fn draft_code(
    s: &mut dyn Session,
    spec: &SubFunctionSpec,
    level: CodeLevel,
    ctx: &DraftContext<'_>,
) -> Result<(CodeUnit, IntegratedSource)> {
    if let Some(required) = level.higher() {
        match ctx.higher {
            Some(u) if u.level == required && u.subfunction == spec.name => {}
            _ => {
                return Err(Error::Precondition(format!(
                    "drafting `{}` at {level} needs an accepted {required} unit",
                    spec.name
                )))
            }
        }
    }
    if ctx.integrated.level != level {
        return Err(Error::Precondition(format!("integrated source is {}, not {level}", ctx.integrated.level)));
    }
    let attempt = ctx.attempt.to_string();
    let round = ctx.round.to_string();
    let mut body = format!(
        "{}\nDictionary:\n{}\n\n",
        level_instructions(level, &spec.name),
        wire::pretty(spec)
    );
    if !ctx.prompt.per_subfunction_addendum.is_empty() {
        body.push_str(&format!("Additional instructions:\n{}\n\n", ctx.prompt.per_subfunction_addendum));
    }
    if let Some(h) = ctx.higher {
        body.push_str(&format!("Reference implementation ({}):\n{}\n", h.level, h.source_text));
    }
    if !ctx.integrated.text.trim().is_empty() {
        body.push_str(&format!("Current {level} file:\n{}\n", ctx.integrated.text));
    }
    for f in ctx.feedback {
        body.push_str(&format!("Feedback: {f}\n"));
    }
    if let (AttemptMode::Revise, Some((prev, problems))) = (ctx.mode, &ctx.previous) {
        body.push_str(&format!("\nPrevious attempt (v{}):\n{}\nProblems:\n{}\n", prev.version, prev.source_text, problems));
    }
    let mut reminder: Option<String> = None;
    for pass in 0..2 {
        let mut hdr = vec![
            ("task", "draft"),
            ("subfunction", spec.name.as_str()),
            ("level", level.as_str()),
            ("attempt", attempt.as_str()),
            ("mode", ctx.mode.as_str()),
            ("round", round.as_str()),
        ];
        if pass > 0 {
            hdr.push(("reprompt", ""));
        }
        let mut user = format!("{}\n{body}", wire::header(&hdr));
        if let Some(r) = &reminder {
            user.push_str(&format!("\n{r}\n"));
        }
        let system = format!("{}\n{}", ctx.prompt.base_prompt, level_instructions(level, &spec.name));
        let request = CompletionRequest::new(Agent::Coder, "draft", vec![ChatMessage::system(system), ChatMessage::user(user)]);
        let text = s.complete(request)?.text;
        let parsed = parse_patch(&text).and_then(|block| {
            if block.subfunction_name != spec.name {
                return Err(Error::PatchBodyMismatch {
                    name: spec.name.clone(),
                    reason: format!("label names `{}`", block.subfunction_name),
                });
            }
            let trial = apply_patch(ctx.integrated, &block)?;
            Ok((block, trial))
        });
        match parsed {
            Ok((block, trial)) => {
                let unit = CodeUnit {
                    subfunction: spec.name.clone(),
                    level,
                    source_text: block.body,
                    version: ctx.version,
                    derived_from: ctx.higher.map(|h| UnitRef { level: h.level, version: h.version }),
                };
                return Ok((unit, trial));
            }
            Err(e) if e.is_patch_protocol() && pass == 0 => {
                reminder = Some(format!("Your reply was rejected ({e}). {}", protocol_reminder(&spec.name)));
            }
            Err(e) if e.is_patch_protocol() => return Err(Error::PatchUnparseable(e.to_string())),
            Err(e) => return Err(e),
        }
    }
    unreachable!("draft loop returns within two passes")
}

pub enum TestOracle<'a> {
    Document(&'a SpecDocument),
    /// Accepted SCRIPT integrated source, at the given commit version.
    HigherLevel { source: &'a IntegratedSource, version: u32 },
}

#[derive(Deserialize)]
struct CasesWire {
    cases: Vec<CaseWire>,
}

#[derive(Deserialize)]
struct CaseWire {
    inputs: Vec<serde_json::Value>,
    #[serde(default)]
    expected: Vec<serde_json::Value>,
}

fn literal(v: &serde_json::Value) -> Option<String> {
    let s = match v {
        serde_json::Value::String(s) => s.trim().to_string(),
        serde_json::Value::Number(n) => n.to_string(),
        _ => return None,
    };
    parse_literal(&s).map(|_| s)
}

const VERIFIER_TESTS_SYSTEM: &str = "You derive test cases for one sub-function. Reply with one ```json block {\"cases\": [{\"inputs\": [..], \"expected\": [..]}]} using integer literals (hex with 0x or decimal).";

/// Builds cases for `spec` at `level`. SPEC cases are copied from the
/// document by the Verifier; HIGHER_LEVEL cases take only inputs from the
/// Verifier and compute expected values by running the oracle.
pub fn derive_tests(
    s: &mut dyn Session,
    spec: &SubFunctionSpec,
    level: CodeLevel,
    oracle: TestOracle<'_>,
    context_chars: usize,
) -> Result<Vec<TestCase>> {
    if !level.is_executable() {
        return Err(Error::NoTestsAvailable(format!("{} at {level} (not executable)", spec.name)));
    }
    let origin_tag = match oracle {
        TestOracle::Document(_) => "SPEC",
        TestOracle::HigherLevel { .. } => "HIGHER_LEVEL",
    };
    let mut user = format!(
        "{}\nDictionary:\n{}\n\n",
        wire::header(&[
            ("task", "derive-tests"),
            ("subfunction", spec.name.as_str()),
            ("level", level.as_str()),
            ("origin", origin_tag),
        ]),
        wire::pretty(spec)
    );
    match &oracle {
        TestOracle::Document(doc) => {
            let ctx = render_context(doc, &doc.section_ids(), context_chars)?;
            user.push_str("Copy input/expected pairs that the document states explicitly (worked examples, test vectors, table rows). Reply with an empty list if there are none.\n\nDocument:\n");
            user.push_str(&ctx.text);
        }
        TestOracle::HigherLevel { .. } => {
            user.push_str("Propose inputs that exercise this sub-function; expected values are computed separately, so give inputs only.\n");
        }
    }
    let request = CompletionRequest::new(
        Agent::Verifier,
        "derive-tests",
        vec![ChatMessage::system(VERIFIER_TESTS_SYSTEM), ChatMessage::user(user)],
    );
    let text = s.complete(request)?.text;
    let parsed: Vec<CaseWire> = wire::fenced_block(&text, "json")
        .and_then(|b| serde_json::from_str::<CasesWire>(b).ok())
        .map(|w| w.cases)
        .unwrap_or_default();
    let want_out = spec.outputs.len();
    let mut cases = Vec::new();
    for raw in parsed {
        let inputs: Option<Vec<String>> = raw.inputs.iter().map(literal).collect();
        let Some(inputs) = inputs.filter(|i| i.len() == spec.inputs.len()) else {
            tracing::warn!(subfunction = %spec.name, "dropping proposed case with malformed inputs");
            continue;
        };
        let expected = match oracle {
            TestOracle::Document(_) => {
                let e: Option<Vec<String>> = raw.expected.iter().map(literal).collect();
                match e.filter(|e| e.len() == want_out) {
                    Some(e) => e,
                    None => {
                        tracing::warn!(subfunction = %spec.name, "dropping extracted case with malformed expected values");
                        continue;
                    }
                }
            }
            TestOracle::HigherLevel { .. } => Vec::new(),
        };
        let n = cases.len() + 1;
        let (id, origin) = match oracle {
            TestOracle::Document(_) => (format!("{}-spec-{n}", spec.name), TestOrigin::Spec),
            TestOracle::HigherLevel { .. } => (format!("{}-hl-{n}", spec.name), TestOrigin::HigherLevel),
        };
        cases.push(TestCase { id, level, inputs, expected, origin, oracle: None, entry: None });
    }
    if cases.is_empty() {
        return Err(Error::NoTestsAvailable(format!("{} at {level}", spec.name)));
    }
    if let TestOracle::HigherLevel { source, version } = oracle {
        let sig = signature_of(spec);
        fill_expected(s, &mut cases, source, version, &|name: &str| (name == sig.name).then(|| sig.clone()))?;
    }
    Ok(cases)
}

/// (Re)computes expected values of HIGHER_LEVEL cases by executing `oracle`.
pub fn fill_expected(
    s: &mut dyn Session,
    cases: &mut [TestCase],
    oracle: &IntegratedSource,
    version: u32,
    sigs: &dyn Fn(&str) -> Option<EntrySignature>,
) -> Result<()> {
    let calls: Vec<(usize, HarnessCase)> = cases
        .iter()
        .enumerate()
        .filter(|(_, c)| c.origin == TestOrigin::HigherLevel)
        .map(|(i, c)| (i, HarnessCase { id: c.id.clone(), entry: c.entry.clone().unwrap_or_else(|| entry_of(c)), inputs: c.inputs.clone() }))
        .collect();
    if calls.is_empty() {
        return Ok(());
    }
    let harness: Vec<HarnessCase> = calls.iter().map(|(_, h)| h.clone()).collect();
    let (observations, _) = execute_cases(s, oracle, &harness, sigs).map_err(|e| Error::OracleExecutionFailed(e.to_string()))?;
    let oracle_ref = OracleRef { level: oracle.level, version, source_hash: sha256_hex(&oracle.text) };
    for ((i, h), obs) in calls.iter().zip(observations) {
        let values = obs.map_err(|e| Error::OracleExecutionFailed(format!("case {}: {e}", h.id)))?;
        cases[*i].expected = values;
        cases[*i].oracle = Some(oracle_ref.clone());
    }
    Ok(())
}

/// Sub-function a case id belongs to (`<name>-<kind>-<n>`).
fn entry_of(c: &TestCase) -> String {
    c.id.split('-').next().unwrap_or_default().to_string()
}

const VERIFIER_CODE_SYSTEM: &str = "You review an implementation of one sub-function. First line `VERDICT: ACCEPT`, `VERDICT: REVISE` or `VERDICT: REGENERATE`; then `SUSPICION: CURRENT|PRIOR_SUBFUNCTION|INSTRUCTIONS|UNKNOWN`; then one `- comment` per problem.";

struct Review {
    accept: bool,
    mode: AttemptMode,
    suspicion: Suspicion,
    comments: Vec<String>,
}

fn parse_review(text: &str) -> Review {
    let verdict = wire::field(text, "VERDICT").map(|v| v.to_ascii_uppercase()).unwrap_or_default();
    let suspicion = match wire::field(text, "SUSPICION").map(|v| v.to_ascii_uppercase()).as_deref() {
        Some("CURRENT") => Suspicion::Current,
        Some("PRIOR_SUBFUNCTION") => Suspicion::PriorSubfunction,
        Some("INSTRUCTIONS") => Suspicion::Instructions,
        _ => Suspicion::Unknown,
    };
    Review {
        accept: verdict == "ACCEPT",
        mode: if verdict == "REGENERATE" { AttemptMode::Regenerate } else { AttemptMode::Revise },
        suspicion,
        comments: wire::bullets(text),
    }
}

pub struct VerifyContext<'a> {
    pub attempt: u32,
    pub round: u32,
    pub sigs: &'a dyn Fn(&str) -> Option<EntrySignature>,
}

/// Runs the cases mechanically, or falls back to Verifier self-validation
/// when there are none. Failing executable runs get a Verifier assessment
/// of where the fault likely lies.
pub fn verify_code(
    s: &mut dyn Session,
    unit: &CodeUnit,
    trial: &IntegratedSource,
    tests: &[TestCase],
    spec: &SubFunctionSpec,
    ctx: &VerifyContext<'_>,
) -> Result<VerificationReport> {
    let attempt = ctx.attempt.to_string();
    let round = ctx.round.to_string();
    let hdr = |mode: &str| {
        wire::header(&[
            ("task", "verify-code"),
            ("subfunction", spec.name.as_str()),
            ("level", unit.level.as_str()),
            ("attempt", attempt.as_str()),
            ("round", round.as_str()),
            ("check", mode),
        ])
    };
    if tests.is_empty() {
        let user = format!(
            "{}\nCompare the implementation against the dictionary.\nDictionary:\n{}\n\nImplementation ({}):\n{}",
            hdr("self"),
            wire::pretty(spec),
            unit.level,
            unit.source_text
        );
        let request = CompletionRequest::new(
            Agent::Verifier,
            "verify-code",
            vec![ChatMessage::system(VERIFIER_CODE_SYSTEM), ChatMessage::user(user)],
        );
        let review = parse_review(&s.complete(request)?.text);
        return Ok(VerificationReport {
            passed: review.accept,
            case_results: Vec::new(),
            suspicion: Suspicion::Current,
            notes: review.comments.join("\n"),
            next_mode: review.mode,
        });
    }
    let (case_results, diagnostics) = match run_testcases(s, trial, &spec.name, tests, ctx.sigs) {
        Ok((results, exec)) => {
            let diag = if exec.stderr.trim().is_empty() { String::new() } else { exec.stderr.clone() };
            (results, diag)
        }
        Err(Error::HarnessGenerationFailed(msg)) => (
            tests
                .iter()
                .map(|t| CaseResult { id: t.id.clone(), status: CaseStatus::Error, observed: format!("harness: {msg}") })
                .collect(),
            format!("harness generation failed: {msg}"),
        ),
        Err(e) => return Err(e),
    };
    if case_results.iter().all(|c| c.status == CaseStatus::Pass) {
        return Ok(VerificationReport {
            passed: true,
            case_results,
            suspicion: Suspicion::Current,
            notes: String::new(),
            next_mode: AttemptMode::Revise,
        });
    }
    let mut table = String::new();
    for (t, r) in tests.iter().zip(&case_results) {
        let entry = t.entry.as_deref().unwrap_or(&spec.name);
        table.push_str(&format!(
            "{} {:?} {}({}) expected {} observed {} [origin {:?}]\n",
            r.id,
            r.status,
            entry,
            t.inputs.join(", "),
            t.expected.join(" "),
            r.observed,
            t.origin
        ));
    }
    let diag: String = diagnostics.chars().take(4_000).collect();
    let user = format!(
        "{}\nTest results:\n{table}\nDiagnostics:\n{diag}\n\nDictionary:\n{}\n\nImplementation ({}):\n{}",
        hdr("tests"),
        wire::pretty(spec),
        unit.level,
        unit.source_text
    );
    let request = CompletionRequest::new(
        Agent::Verifier,
        "verify-code",
        vec![ChatMessage::system(VERIFIER_CODE_SYSTEM), ChatMessage::user(user)],
    );
    let review = parse_review(&s.complete(request)?.text);
    let mut notes = review.comments.join("\n");
    if !diag.is_empty() {
        notes.push_str(&format!("\n{diag}"));
    }
    Ok(VerificationReport {
        passed: false,
        case_results,
        suspicion: review.suspicion,
        notes: notes.trim().to_string(),
        next_mode: review.mode,
    })
}

const OPTIMIZER_SYSTEM: &str = "You improve the instructions given to a code generator, based on its recent failures. Reply with a line starting `ADDENDUM:` followed by the complete replacement addendum text.";

/// Adds one optimizer revision. The base prompt is never touched; a reply
/// without an `ADDENDUM:` line leaves the state unchanged (returns `false`).
pub fn optimize_prompt(
    s: &mut dyn Session,
    state: &mut PromptState,
    subfunction: &str,
    level: CodeLevel,
    coding_log: &[String],
    consecutive_failures: u32,
    trigger: u32,
) -> Result<bool> {
    if consecutive_failures < trigger {
        return Err(Error::Precondition(format!(
            "prompt optimization needs {trigger} consecutive failures, saw {consecutive_failures}"
        )));
    }
    let revision = (state.optimizer_revisions.len() + 1).to_string();
    let log: String = coding_log.iter().map(|l| format!("- {l}\n")).collect();
    let user = format!(
        "{}\nBase instructions:\n{}\n\nCurrent addendum:\n{}\n\nRecent attempts:\n{log}",
        wire::header(&[
            ("task", "optimize-prompt"),
            ("subfunction", subfunction),
            ("level", level.as_str()),
            ("revision", &revision),
        ]),
        state.base_prompt,
        if state.per_subfunction_addendum.is_empty() { "(none)" } else { &state.per_subfunction_addendum },
    );
    let request = CompletionRequest::new(
        Agent::PromptOptimizer,
        "optimize-prompt",
        vec![ChatMessage::system(OPTIMIZER_SYSTEM), ChatMessage::user(user)],
    );
    let text = s.complete(request)?.text;
    let trigger_summary = coding_log.last().cloned().unwrap_or_default();
    let addendum = text.find("ADDENDUM:").map(|i| text[i + "ADDENDUM:".len()..].trim().to_string());
    let applied = matches!(&addendum, Some(a) if !a.is_empty());
    if let (true, Some(a)) = (applied, &addendum) {
        state.per_subfunction_addendum = a.clone();
        state.optimizer_revisions.push(OptimizerRevision { trigger_summary: trigger_summary.clone(), new_addendum: a.clone() });
    }
    s.emit(Event::PromptOptimized(PromptOptimized {
        subfunction: subfunction.to_string(),
        level,
        skipped: !applied,
        trigger_summary,
        new_addendum: if applied { addendum } else { None },
        revisions: state.optimizer_revisions.len() as u32,
    }))?;
    Ok(applied)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopBudgets {
    pub max_attempts: u32,
    pub optimizer_trigger: u32,
}

pub struct LoopInput<'a> {
    pub spec: &'a SubFunctionSpec,
    pub level: CodeLevel,
    pub base: &'a IntegratedSource,
    pub higher: Option<&'a CodeUnit>,
    pub tests: &'a [TestCase],
    pub sigs: &'a dyn Fn(&str) -> Option<EntrySignature>,
    pub budgets: LoopBudgets,
    pub feedback: &'a [String],
    pub round: u32,
    /// Unit to revise on the first attempt, with its known problems.
    pub seed: Option<(CodeUnit, String)>,
}

#[derive(Debug, Clone)]
pub enum LevelOutcome {
    Accepted { unit: CodeUnit, source: IntegratedSource, attempts: u32 },
    Exhausted { report: VerificationReport, attempts: u32, last_unit: Option<CodeUnit> },
}

/// Draft/verify until the unit passes or the attempt budget runs out.
/// `version` holds the last version number used at this level and is
/// advanced for every drafted unit.
pub fn run_level_loop(
    s: &mut dyn Session,
    input: &LoopInput<'_>,
    prompt: &mut PromptState,
    version: &mut u32,
) -> Result<LevelOutcome> {
    if input.budgets.max_attempts == 0 {
        return Err(Error::Precondition("max_attempts must be at least 1".into()));
    }
    let spec = input.spec;
    let mut previous = input.seed.clone();
    let mut mode = if previous.is_some() { AttemptMode::Revise } else { AttemptMode::Draft };
    let mut consecutive = 0u32;
    let mut log: Vec<String> = Vec::new();
    let mut last_report = None;
    let mut last_unit: Option<CodeUnit> = None;
    for attempt in 1..=input.budgets.max_attempts {
        *version += 1;
        let ctx = DraftContext {
            higher: input.higher,
            integrated: input.base,
            prompt,
            attempt,
            round: input.round,
            mode,
            previous: previous.as_ref().map(|(u, p)| (u, p.clone())),
            feedback: input.feedback,
            version: *version,
        };
        let (report, unit) = match draft_code(s, spec, input.level, &ctx) {
            Ok((unit, trial)) => {
                let vctx = VerifyContext { attempt, round: input.round, sigs: input.sigs };
                (verify_code(s, &unit, &trial, input.tests, spec, &vctx)?, Some((unit, trial)))
            }
            Err(e @ Error::PatchUnparseable(_)) => (VerificationReport::rejected(e.to_string()), None),
            Err(e) => return Err(e),
        };
        s.emit(Event::CodingAttempt(CodingAttempt {
            subfunction: spec.name.clone(),
            level: input.level,
            round: input.round,
            attempt,
            version: unit.as_ref().map(|(u, _)| u.version),
            mode,
            passed: report.passed,
            suspicion: report.suspicion,
            cases: report.case_results.clone(),
            notes: report.notes.clone(),
        }))?;
        if report.passed {
            let (unit, source) = unit.expect("a passing report implies a parsed unit");
            return Ok(LevelOutcome::Accepted { unit, source, attempts: attempt });
        }
        let failing = report.failing_ids().join(", ");
        log.push(format!(
            "attempt {attempt} ({}): failing [{failing}] {}",
            mode.as_str(),
            report.notes.lines().next().unwrap_or("")
        ));
        consecutive += 1;
        mode = report.next_mode;
        if let Some((u, _)) = &unit {
            previous = Some((u.clone(), report.describe()));
            last_unit = Some(u.clone());
        } else if mode == AttemptMode::Revise && previous.is_none() {
            mode = AttemptMode::Regenerate;
        }
        if mode == AttemptMode::Revise && previous.is_none() {
            mode = AttemptMode::Regenerate;
        }
        last_report = Some(report);
        if consecutive >= input.budgets.optimizer_trigger && attempt < input.budgets.max_attempts {
            optimize_prompt(s, prompt, &spec.name, input.level, &log, consecutive, input.budgets.optimizer_trigger)?;
            consecutive = 0;
        }
    }
    Ok(LevelOutcome::Exhausted {
        report: last_report.expect("at least one attempt ran"),
        attempts: input.budgets.max_attempts,
        last_unit,
    })
}

/// Splices a unit into a source (used when committing accepted units).
pub fn commit_unit(source: &IntegratedSource, unit: &CodeUnit) -> Result<IntegratedSource> {
    apply_patch(source, &PatchBlock { subfunction_name: unit.subfunction.clone(), body: unit.source_text.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{parse_transcript, ScriptedProvider};
    use crate::sandbox::{LocalExecutor, Sandbox, Toolchain};
    use crate::session::MemorySession;
    use crate::understanding::Port;

    fn port(n: &str) -> Port {
        Port { name: n.into(), type_description: "unsigned".into(), shape_or_width: "16 bits".into() }
    }

    fn spec(name: &str, inputs: &[&str]) -> SubFunctionSpec {
        SubFunctionSpec {
            name: name.into(),
            inputs: inputs.iter().map(|n| port(n)).collect(),
            outputs: vec![port("y")],
            functionality: "f".into(),
            side_effect_only: false,
            references: vec![],
            depends_on: vec![],
            revision: 0,
        }
    }

    fn session(transcript: &str, dir: &std::path::Path) -> MemorySession {
        let p = ScriptedProvider::new(parse_transcript(transcript).unwrap());
        MemorySession::new(Box::new(p), Box::new(LocalExecutor::new(Sandbox::new(Toolchain::default()), dir)))
    }

    fn line(agent: &str, pats: &[&str], response: &str) -> String {
        serde_json::json!({"agent": agent, "match": pats, "response": response}).to_string() + "\n"
    }

    fn fence(name: &str, body: &str) -> String {
        format!("Here it is.\n{}\nSUBFUNCTION: {name}\n{body}{}\n", "*".repeat(20), "*".repeat(20))
    }

    const ADD_PY: &str = "def AddRoundKey(s, k):\n    return s ^ k\n";
    const BAD_PY: &str = "def AddRoundKey(s, k):\n    return s | k\n";

    fn sigs(name: &str) -> Option<EntrySignature> {
        (name == "AddRoundKey").then(|| signature_of(&spec("AddRoundKey", &["s", "k"])))
    }

    fn pseudo_unit() -> CodeUnit {
        CodeUnit {
            subfunction: "AddRoundKey".into(),
            level: CodeLevel::Pseudo,
            source_text: "FUNCTION AddRoundKey(s, k)\n  RETURN s XOR k\nEND FUNCTION\n".into(),
            version: 1,
            derived_from: None,
        }
    }

    fn spec_case(id: &str, a: &str, b: &str, y: &str) -> TestCase {
        TestCase {
            id: id.into(),
            level: CodeLevel::Script,
            inputs: vec![a.into(), b.into()],
            expected: vec![y.into()],
            origin: TestOrigin::Spec,
            oracle: None,
            entry: None,
        }
    }

    #[test]
    fn pseudo_draft_and_missing_higher_level() {
        let tmp = tempfile::tempdir().unwrap();
        let body = "FUNCTION AddRoundKey(s, k)\n  RETURN s XOR k\nEND FUNCTION\n";
        let mut s = session(&line("Coder", &["@level PSEUDO\n"], &fence("AddRoundKey", body)), tmp.path());
        let base = IntegratedSource::skeleton(CodeLevel::Pseudo);
        let prompt = PromptState::default();
        let ctx = DraftContext {
            higher: None,
            integrated: &base,
            prompt: &prompt,
            attempt: 1,
            round: 1,
            mode: AttemptMode::Draft,
            previous: None,
            feedback: &[],
            version: 1,
        };
        let (unit, trial) = draft_code(&mut s, &spec("AddRoundKey", &["s", "k"]), CodeLevel::Pseudo, &ctx).unwrap();
        assert_eq!((unit.version, unit.source_text.as_str()), (1, body));
        assert_eq!(trial.text, body);

        let synth_base = IntegratedSource::skeleton(CodeLevel::Synth);
        let ctx = DraftContext { integrated: &synth_base, ..ctx };
        let err = draft_code(&mut s, &spec("AddRoundKey", &["s", "k"]), CodeLevel::Synth, &ctx).unwrap_err();
        assert_eq!(err.code(), "PRECONDITION_VIOLATED");
    }

    #[test]
    fn missing_fence_fails_after_one_reprompt() {
        let tmp = tempfile::tempdir().unwrap();
        let t = line("Coder", &["@task draft\n"], "def AddRoundKey(s, k): return s ^ k")
            + &line("Coder", &["@reprompt\n"], "still no fence");
        let mut s = session(&t, tmp.path());
        let base = IntegratedSource::skeleton(CodeLevel::Script);
        let prompt = PromptState::default();
        let higher = pseudo_unit();
        let ctx = DraftContext {
            higher: Some(&higher),
            integrated: &base,
            prompt: &prompt,
            attempt: 1,
            round: 1,
            mode: AttemptMode::Draft,
            previous: None,
            feedback: &[],
            version: 1,
        };
        let err = draft_code(&mut s, &spec("AddRoundKey", &["s", "k"]), CodeLevel::Script, &ctx).unwrap_err();
        assert_eq!(err.code(), "PATCH_UNPARSEABLE");
        assert_eq!(s.provider_calls(), 2);
    }

    #[test]
    fn higher_level_expectations_come_from_the_oracle() {
        let tmp = tempfile::tempdir().unwrap();
        let t = line(
            "Verifier",
            &["@origin HIGHER_LEVEL\n"],
            "```json\n{\"cases\":[{\"inputs\":[\"0x00\",\"0x5\"],\"expected\":[\"0xdead\"]}]}\n```",
        );
        let mut s = session(&t, tmp.path());
        let oracle = IntegratedSource::new(CodeLevel::Script, ADD_PY).unwrap();
        let cases = derive_tests(
            &mut s,
            &spec("AddRoundKey", &["s", "k"]),
            CodeLevel::Synth,
            TestOracle::HigherLevel { source: &oracle, version: 3 },
            10_000,
        )
        .unwrap();
        assert_eq!(cases[0].expected, vec!["0x5"]);
        let o = cases[0].oracle.as_ref().unwrap();
        assert_eq!((o.level, o.version), (CodeLevel::Script, 3));

        assert_eq!(
            derive_tests(&mut s, &spec("AddRoundKey", &["s", "k"]), CodeLevel::Pseudo, TestOracle::HigherLevel { source: &oracle, version: 3 }, 100)
                .unwrap_err()
                .code(),
            "NO_TESTS_AVAILABLE"
        );
    }

    #[test]
    fn self_validation_path_and_suspicion() {
        let tmp = tempfile::tempdir().unwrap();
        let t = line("Verifier", &["@check self\n"], "VERDICT: ACCEPT")
            + &line("Verifier", &["@check tests\n"], "VERDICT: REVISE\nSUSPICION: PRIOR_SUBFUNCTION\n- round key looks shifted");
        let mut s = session(&t, tmp.path());
        let sp = spec("AddRoundKey", &["s", "k"]);
        let unit = pseudo_unit();
        let pseudo = IntegratedSource::new(CodeLevel::Pseudo, unit.source_text.clone()).unwrap();
        let vctx = VerifyContext { attempt: 1, round: 1, sigs: &sigs };
        let r = verify_code(&mut s, &unit, &pseudo, &[], &sp, &vctx).unwrap();
        assert!(r.passed);

        let unit = CodeUnit { level: CodeLevel::Script, source_text: BAD_PY.into(), ..pseudo_unit() };
        let trial = IntegratedSource::new(CodeLevel::Script, BAD_PY).unwrap();
        let r = verify_code(&mut s, &unit, &trial, &[spec_case("c1", "0x3", "0x1", "0x2")], &sp, &vctx).unwrap();
        assert!(!r.passed);
        assert_eq!(r.suspicion, Suspicion::PriorSubfunction);
        assert_eq!(r.case_results[0].observed, "0x3");
    }

    fn loop_transcript(fails: usize) -> String {
        let mut t = String::new();
        for _ in 0..fails {
            t += &line("Coder", &["@task draft\n"], &fence("AddRoundKey", BAD_PY));
        }
        t += &line("Coder", &["@task draft\n"], &fence("AddRoundKey", ADD_PY));
        t += &serde_json::json!({"agent": "Verifier", "match": ["@check tests\n"], "response": "VERDICT: REVISE\nSUSPICION: CURRENT\n- uses OR", "max_uses": "unlimited"}).to_string();
        t += "\n";
        t += &line("PromptOptimizer", &[], "Noted.\nADDENDUM: combine the state and key with XOR; both are 16-bit words.");
        t += &line("PromptOptimizer", &[], "no addendum here");
        t
    }

    fn run_loop(fails: usize, max_attempts: u32) -> (LevelOutcome, PromptState, MemorySession, tempfile::TempDir) {
        let tmp = tempfile::tempdir().unwrap();
        let mut s = session(&loop_transcript(fails), tmp.path());
        let sp = spec("AddRoundKey", &["s", "k"]);
        let base = IntegratedSource::skeleton(CodeLevel::Script);
        let higher = pseudo_unit();
        let tests = [spec_case("c1", "0x3", "0x1", "0x2")];
        let input = LoopInput {
            spec: &sp,
            level: CodeLevel::Script,
            base: &base,
            higher: Some(&higher),
            tests: &tests,
            sigs: &sigs,
            budgets: LoopBudgets { max_attempts, optimizer_trigger: 3 },
            feedback: &[],
            round: 1,
            seed: None,
        };
        let mut prompt = PromptState::default();
        let mut version = 0;
        let out = run_level_loop(&mut s, &input, &mut prompt, &mut version).unwrap();
        (out, prompt, s, tmp)
    }

    #[test]
    fn loop_accepts_after_optimizer_fires() {
        let (out, prompt, s, _tmp) = run_loop(3, 10);
        match out {
            LevelOutcome::Accepted { attempts, unit, .. } => assert_eq!((attempts, unit.version), (4, 4)),
            other => panic!("{other:?}"),
        }
        assert_eq!(prompt.optimizer_revisions.len(), 1);
        assert_eq!(prompt.base_prompt, CODER_BASE_PROMPT);
        assert!(prompt.per_subfunction_addendum.contains("16-bit"));
        let attempts = s.events.iter().filter(|e| matches!(e, Event::CodingAttempt(_))).count();
        assert_eq!(attempts, 4);
    }

    #[test]
    fn loop_exhaustion_carries_suspicion() {
        let (out, _, _, _tmp) = run_loop(5, 2);
        match out {
            LevelOutcome::Exhausted { report, attempts, last_unit } => {
                assert_eq!(attempts, 2);
                assert_eq!(report.suspicion, Suspicion::Current);
                assert_eq!(last_unit.unwrap().version, 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn optimizer_precondition_and_history() {
        let tmp = tempfile::tempdir().unwrap();
        let mut s = session(&loop_transcript(0), tmp.path());
        let mut st = PromptState::default();
        let err = optimize_prompt(&mut s, &mut st, "AddRoundKey", CodeLevel::Script, &[], 2, 3).unwrap_err();
        assert_eq!(err.code(), "PRECONDITION_VIOLATED");
        assert!(optimize_prompt(&mut s, &mut st, "AddRoundKey", CodeLevel::Script, &["a".into()], 3, 3).unwrap());
        assert!(!optimize_prompt(&mut s, &mut st, "AddRoundKey", CodeLevel::Script, &["b".into()], 3, 3).unwrap());
        assert_eq!(st.optimizer_revisions.len(), 1);
    }
}
