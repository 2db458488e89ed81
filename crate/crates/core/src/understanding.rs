//! Document understanding: per-section summaries, a dependency-ordered
//! decomposition plan, and a verified information dictionary per
//! sub-function.
//!
//! Plans and dictionaries travel as fenced ```json blocks with a strict
//! schema. Citations are grounded locally: every quote must occur verbatim in
//! the cited section, so an agent cannot invent references.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::document::{render_context, SpecDocument};
use crate::error::{Error, Result};
use crate::orchestrator::events::{Event, SectionSummarized};
use crate::patcher::is_identifier;
use crate::provider::{Agent, ChatMessage, CompletionRequest};
use crate::session::Session;
use crate::wire;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionSummary {
    pub section_id: String,
    pub summary_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanItem {
    pub name: String,
    pub goal: String,
    #[serde(default)]
    pub depends_on: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompositionPlan {
    pub target: String,
    pub sub_functions: Vec<PlanItem>,
}

impl DecompositionPlan {
    pub fn item(&self, name: &str) -> Option<&PlanItem> {
        self.sub_functions.iter().find(|i| i.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.sub_functions.iter().position(|i| i.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.sub_functions.iter().map(|i| i.name.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Port {
    pub name: String,
    pub type_description: String,
    pub shape_or_width: String,
}

impl Port {
    /// True when the width is declared in bits (`16 bits`, `1-bit`, ...);
    /// such values are exchanged in hex.
    pub fn is_bit_width(&self) -> bool {
        let re = regex::Regex::new(r"(?i)\bbits?\b").expect("static regex");
        re.is_match(&self.shape_or_width)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub section_id: String,
    pub quote: String,
}

/// The information dictionary for one sub-function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubFunctionSpec {
    pub name: String,
    pub inputs: Vec<Port>,
    pub outputs: Vec<Port>,
    pub functionality: String,
    #[serde(default)]
    pub side_effect_only: bool,
    pub references: Vec<Reference>,
    #[serde(default)]
    pub depends_on: Vec<String>,
    #[serde(default)]
    pub revision: u32,
}

/// What agents emit; the engine owns `depends_on` and `revision`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecWire {
    name: String,
    inputs: Vec<Port>,
    outputs: Vec<Port>,
    functionality: String,
    #[serde(default)]
    side_effect_only: bool,
    references: Vec<Reference>,
    #[serde(default)]
    #[allow(dead_code)]
    depends_on: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Accept,
    Revise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierFeedback {
    pub verdict: Verdict,
    pub comments: Vec<String>,
}

impl VerifierFeedback {
    fn revise(comments: Vec<String>) -> Self {
        VerifierFeedback { verdict: Verdict::Revise, comments }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnderstandingBudgets {
    pub max_rounds: u32,
    /// Character budget for rendered document context.
    pub context_chars: usize,
}

impl Default for UnderstandingBudgets {
    fn default() -> Self {
        UnderstandingBudgets { max_rounds: 3, context_chars: 24_000 }
    }
}

const SUMMARIZER_SYSTEM: &str = "You summarize one section of a hardware algorithm document. Reply with a concise plain-text summary that keeps every number, table entry and naming convention needed to implement it.";
const DECOMPOSER_SYSTEM: &str = "You split a target algorithm into an ordered list of implementable sub-functions. Every dependency must name an earlier entry. Reply with one ```json block: {\"target\": str, \"sub_functions\": [{\"name\": str, \"goal\": str, \"depends_on\": [str]}]}.";
const DESCRIBER_SYSTEM: &str = "You write the information dictionary for one sub-function. Reply with one ```json block: {\"name\", \"inputs\": [{\"name\", \"type_description\", \"shape_or_width\"}], \"outputs\": [...], \"functionality\", \"side_effect_only\": bool, \"references\": [{\"section_id\", \"quote\"}]}. Quotes must be copied verbatim from the cited section.";
const VERIFIER_SYSTEM: &str = "You review an information dictionary against the source document. First line: `VERDICT: ACCEPT` or `VERDICT: REVISE`, then one `- comment` line per problem.";

fn sections_digest(summaries: &[SectionSummary]) -> String {
    summaries.iter().map(|s| format!("[{}] {}\n", s.section_id, s.summary_text)).collect()
}

fn full_context(doc: &SpecDocument, budget: usize) -> Result<(String, Vec<String>)> {
    let ctx = render_context(doc, &doc.section_ids(), budget)?;
    Ok((ctx.text, ctx.attachments))
}

/// One Summarizer call per section, in document order.
pub fn summarize_sections(
    s: &mut dyn Session,
    doc: &SpecDocument,
    budgets: &UnderstandingBudgets,
) -> Result<Vec<SectionSummary>> {
    let mut out = Vec::with_capacity(doc.sections.len());
    for section in &doc.sections {
        let ctx = render_context(doc, std::slice::from_ref(&section.section_id), budgets.context_chars)?;
        let user = format!(
            "{}\n{}",
            wire::header(&[("task", "summarize"), ("section", &section.section_id)]),
            ctx.text
        );
        let request = CompletionRequest::new(
            Agent::Summarizer,
            "summarize",
            vec![ChatMessage::system(SUMMARIZER_SYSTEM), ChatMessage::user(user).with_images(&ctx.attachments)],
        );
        let result = s.complete(request).map_err(|e| match e {
            Error::NoMatchingEntry { agent, tag } => {
                Error::NoMatchingEntry { agent, tag: format!("{tag} (section {})", section.section_id) }
            }
            other => other,
        })?;
        let summary_text = result.text.trim().to_string();
        if summary_text.is_empty() {
            return Err(Error::EmptySummary(section.section_id.clone()));
        }
        s.emit(Event::SectionSummarized(SectionSummarized {
            section_id: section.section_id.clone(),
            summary: summary_text.clone(),
        }))?;
        out.push(SectionSummary { section_id: section.section_id.clone(), summary_text });
    }
    Ok(out)
}

/// Structural plan checks; an empty result means the plan is valid.
pub fn validate_plan(plan: &DecompositionPlan, target: &str) -> Vec<String> {
    let mut issues = Vec::new();
    if plan.sub_functions.is_empty() {
        issues.push("plan lists no sub-functions".to_string());
    }
    if plan.target != target {
        issues.push(format!("plan target `{}` differs from the requested target `{target}`", plan.target));
    }
    let mut seen = HashSet::new();
    for item in &plan.sub_functions {
        if !is_identifier(&item.name) {
            issues.push(format!("`{}` is not a valid identifier", item.name));
        }
        for dep in &item.depends_on {
            if dep == &item.name {
                issues.push(format!("`{}` depends on itself", item.name));
            } else if !seen.contains(dep.as_str()) {
                issues.push(format!("`{}` depends on `{dep}`, which is not declared earlier in the plan", item.name));
            }
        }
        if !seen.insert(item.name.as_str()) {
            issues.push(format!("duplicate sub-function name `{}`", item.name));
        }
    }
    issues
}

fn parse_plan(text: &str) -> std::result::Result<DecompositionPlan, String> {
    let block = wire::fenced_block(text, "json").ok_or("response has no ```json block")?;
    serde_json::from_str(block).map_err(|e| format!("plan JSON rejected: {e}"))
}

/// Asks the Decomposer for a plan; one reprompt carrying the problems found.
pub fn decompose(
    s: &mut dyn Session,
    doc: &SpecDocument,
    summaries: &[SectionSummary],
    target: &str,
    budgets: &UnderstandingBudgets,
) -> Result<DecompositionPlan> {
    let covered: HashSet<&str> = summaries.iter().map(|x| x.section_id.as_str()).collect();
    if let Some(missing) = doc.sections.iter().find(|sec| !covered.contains(sec.section_id.as_str())) {
        return Err(Error::Precondition(format!("section `{}` has no summary", missing.section_id)));
    }
    let (context, images) = full_context(doc, budgets.context_chars)?;
    let mut problems: Option<String> = None;
    for attempt in 0..2 {
        let mut hdr = vec![("task", "decompose"), ("target", target)];
        if attempt > 0 {
            hdr.push(("reprompt", ""));
        }
        let mut user = format!(
            "{}\nTarget function: {target}\n\nSection summaries:\n{}\nDocument:\n{context}",
            wire::header(&hdr),
            sections_digest(summaries)
        );
        if let Some(p) = &problems {
            user.push_str(&format!("\nYour previous plan was rejected:\n{p}\n"));
        }
        let request = CompletionRequest::new(
            Agent::Decomposer,
            "decompose",
            vec![ChatMessage::system(DECOMPOSER_SYSTEM), ChatMessage::user(user).with_images(&images)],
        );
        let text = s.complete(request)?.text;
        match parse_plan(&text) {
            Err(e) if attempt == 0 => problems = Some(format!("- {e}")),
            Err(e) => return Err(Error::PlanUnparseable(e)),
            Ok(plan) => {
                let issues = validate_plan(&plan, target);
                if issues.is_empty() {
                    return Ok(plan);
                }
                if attempt > 0 {
                    return Err(Error::PlanInvalid(issues.join("; ")));
                }
                problems = Some(issues.iter().map(|i| format!("- {i}\n")).collect());
            }
        }
    }
    unreachable!("decompose loop returns within two attempts")
}

/// Mechanical checks that never need a provider: required fields, port
/// names, and citation grounding.
pub fn local_spec_issues(spec: &SubFunctionSpec, doc: &SpecDocument) -> Vec<String> {
    let mut issues = Vec::new();
    if !is_identifier(&spec.name) {
        issues.push(format!("name `{}` is not an identifier", spec.name));
    }
    if spec.functionality.trim().is_empty() {
        issues.push("functionality is empty".into());
    }
    if !spec.side_effect_only && (spec.inputs.is_empty() || spec.outputs.is_empty()) {
        issues.push("inputs and outputs must be non-empty unless side_effect_only is set".into());
    }
    let mut names = HashSet::new();
    for port in spec.inputs.iter().chain(&spec.outputs) {
        if !is_identifier(&port.name) {
            issues.push(format!("port name `{}` is not an identifier", port.name));
        }
        if port.shape_or_width.trim().is_empty() {
            issues.push(format!("port `{}` has no shape or width", port.name));
        }
    }
    for port in &spec.inputs {
        if !names.insert(port.name.as_str()) {
            issues.push(format!("duplicate input `{}`", port.name));
        }
    }
    issues.extend(reference_issues(spec, doc));
    issues
}

/// Citation grounding: sections exist and quotes occur verbatim.
pub fn reference_issues(spec: &SubFunctionSpec, doc: &SpecDocument) -> Vec<String> {
    let mut issues = Vec::new();
    for r in &spec.references {
        match doc.section(&r.section_id) {
            None => issues.push(format!("reference cites unknown section `{}`", r.section_id)),
            Some(_) if r.quote.trim().is_empty() => {
                issues.push(format!("reference to `{}` has an empty quote", r.section_id))
            }
            Some(sec) if !sec.body_text.contains(&r.quote) => issues.push(format!(
                "quote `{}` does not occur in section `{}`",
                r.quote, r.section_id
            )),
            Some(_) => {}
        }
    }
    issues
}

fn parse_verdict(text: &str) -> VerifierFeedback {
    let comments = wire::bullets(text);
    match wire::field(text, "VERDICT").map(|v| v.to_ascii_uppercase()) {
        Some(v) if v == "ACCEPT" => VerifierFeedback { verdict: Verdict::Accept, comments },
        Some(v) if v == "REVISE" => {
            if comments.is_empty() {
                VerifierFeedback::revise(vec!["verifier requested a revision without comments".into()])
            } else {
                VerifierFeedback::revise(comments)
            }
        }
        _ => VerifierFeedback::revise(vec!["verifier response had no VERDICT line".into()]),
    }
}

fn cited_text(spec: &SubFunctionSpec, doc: &SpecDocument) -> String {
    let mut ids: Vec<&str> = spec.references.iter().map(|r| r.section_id.as_str()).collect();
    ids.dedup();
    let mut out = String::new();
    for sec in doc.sections.iter().filter(|s| ids.contains(&s.section_id.as_str())) {
        out.push_str(&format!("## {} {}\n{}\n", sec.section_id, sec.heading, sec.body_text));
    }
    out
}

/// Local checks first; only a structurally clean dictionary reaches the
/// Verifier agent.
pub fn verify_infodict(s: &mut dyn Session, spec: &SubFunctionSpec, doc: &SpecDocument, round: u32) -> Result<VerifierFeedback> {
    let issues = local_spec_issues(spec, doc);
    if !issues.is_empty() {
        return Ok(VerifierFeedback::revise(issues));
    }
    let user = format!(
        "{}\nDictionary:\n{}\n\nCited sections:\n{}",
        wire::header(&[("task", "verify-infodict"), ("subfunction", &spec.name), ("round", &round.to_string())]),
        wire::pretty(spec),
        cited_text(spec, doc)
    );
    let request = CompletionRequest::new(
        Agent::Verifier,
        "verify-infodict",
        vec![ChatMessage::system(VERIFIER_SYSTEM), ChatMessage::user(user)],
    );
    Ok(parse_verdict(&s.complete(request)?.text))
}

fn parse_spec(text: &str, expected_name: &str) -> std::result::Result<SubFunctionSpec, String> {
    let block = wire::fenced_block(text, "json").ok_or("response has no ```json block")?;
    let w: SpecWire = serde_json::from_str(block).map_err(|e| format!("dictionary JSON rejected: {e}"))?;
    if w.name != expected_name {
        return Err(format!("dictionary is named `{}` but `{expected_name}` was requested", w.name));
    }
    Ok(SubFunctionSpec {
        name: w.name,
        inputs: w.inputs,
        outputs: w.outputs,
        functionality: w.functionality,
        side_effect_only: w.side_effect_only,
        references: w.references,
        depends_on: Vec::new(),
        revision: 0,
    })
}

/// Parses a dictionary emitted by any agent (also used for noise injection).
pub fn parse_spec_response(text: &str, expected_name: &str) -> Result<SubFunctionSpec> {
    parse_spec(text, expected_name).map_err(Error::PlanUnparseable)
}

struct DescribeTask<'a> {
    tag: &'static str,
    name: &'a str,
    intro: String,
}

/// Describer/Verifier rounds until ACCEPT. Returns the accepted spec and the number
/// of REVISE rounds that preceded acceptance.
fn describe_loop(
    s: &mut dyn Session,
    task: DescribeTask<'_>,
    doc: &SpecDocument,
    summaries: &[SectionSummary],
    budgets: &UnderstandingBudgets,
) -> Result<(SubFunctionSpec, u32)> {
    if budgets.max_rounds == 0 {
        return Err(Error::Precondition("max_rounds must be at least 1".into()));
    }
    let (context, images) = full_context(doc, budgets.context_chars)?;
    let mut previous: Option<(String, Vec<String>)> = None;
    for round in 1..=budgets.max_rounds {
        let mut user = format!(
            "{}\n{}\nSection summaries:\n{}\n",
            wire::header(&[("task", task.tag), ("subfunction", task.name), ("round", &round.to_string())]),
            task.intro,
            sections_digest(summaries)
        );
        if let Some((draft, comments)) = &previous {
            user.push_str(&format!("Previous draft:\n{draft}\n\nReviewer comments:\n"));
            for c in comments {
                user.push_str(&format!("- {c}\n"));
            }
            user.push('\n');
        }
        user.push_str(&format!("Document:\n{context}"));
        let request = CompletionRequest::new(
            Agent::Describer,
            task.tag,
            vec![ChatMessage::system(DESCRIBER_SYSTEM), ChatMessage::user(user).with_images(&images)],
        );
        let text = s.complete(request)?.text;
        let feedback = match parse_spec(&text, task.name) {
            Err(e) => VerifierFeedback::revise(vec![e]),
            Ok(spec) => {
                let fb = verify_infodict(s, &spec, doc, round)?;
                if fb.verdict == Verdict::Accept {
                    return Ok((spec, round - 1));
                }
                fb
            }
        };
        previous = Some((text, feedback.comments));
    }
    let last = previous.map(|(_, c)| c.join("; ")).unwrap_or_default();
    Err(Error::AugmentBudgetExhausted { name: task.name.to_string(), feedback: last })
}

/// Builds the verified dictionary for one plan entry.
pub fn augment_subfunction(
    s: &mut dyn Session,
    item: &PlanItem,
    doc: &SpecDocument,
    summaries: &[SectionSummary],
    budgets: &UnderstandingBudgets,
    guidance: &[String],
) -> Result<SubFunctionSpec> {
    let mut intro = format!(
        "Sub-function: {}\nGoal: {}\nDepends on: {}\n",
        item.name,
        item.goal,
        if item.depends_on.is_empty() { "(none)".to_string() } else { item.depends_on.join(", ") }
    );
    for g in guidance {
        intro.push_str(&format!("Operator guidance: {g}\n"));
    }
    let task = DescribeTask { tag: "describe", name: &item.name, intro };
    let (mut spec, revisions) = describe_loop(s, task, doc, summaries, budgets)?;
    spec.depends_on = item.depends_on.clone();
    spec.revision = revisions;
    Ok(spec)
}

/// Rewrites a dictionary in light of a failure report; the result is
/// re-verified and carries the next revision number.
pub fn revise_instructions(
    s: &mut dyn Session,
    spec: &SubFunctionSpec,
    failure_report: &str,
    doc: &SpecDocument,
    summaries: &[SectionSummary],
    budgets: &UnderstandingBudgets,
) -> Result<SubFunctionSpec> {
    if failure_report.trim().is_empty() {
        return Err(Error::Precondition("revise_instructions needs a failure report".into()));
    }
    let intro = format!(
        "The current dictionary (revision {}) led to implementations that fail verification.\nCurrent dictionary:\n{}\n\nFailure report:\n{}\n",
        spec.revision,
        wire::pretty(spec),
        failure_report.trim()
    );
    let task = DescribeTask { tag: "revise-instructions", name: &spec.name, intro };
    let (mut revised, _) = describe_loop(s, task, doc, summaries, budgets)?;
    revised.depends_on = spec.depends_on.clone();
    revised.revision = spec.revision + 1;
    Ok(revised)
}
