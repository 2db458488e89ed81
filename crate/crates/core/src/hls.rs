//! Synthesis readiness: a data-driven lint over the integrated SYNTH source,
//! an optimizer loop that patches offending sub-functions while guarding
//! behavior, and a hand-off to an external synthesizer command.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::level::CodeLevel;
use crate::orchestrator::events::{Event, HlsLinted, HlsOptimized, HlsRoundOutcome, PatchApplied, PatchOrigin};
use crate::patcher::{apply_patch, mask_c_like, parse_patch, IntegratedSource};
use crate::provider::{Agent, ChatMessage, CompletionRequest};
use crate::sandbox::{ExecStatus, Sandbox};
use crate::session::Session;
use crate::wire;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Severity {
    Blocking,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    /// `pattern` is a `|`-separated list of whole-word tokens.
    Token,
    Regex,
    /// A definition whose body calls its own name.
    SelfCall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorScope {
    /// Comments and literals blanked first.
    #[default]
    Code,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detector {
    pub kind: DetectorKind,
    #[serde(default)]
    pub pattern: String,
    #[serde(default)]
    pub scope: DetectorScope,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HlsRule {
    #[serde(rename = "id")]
    pub rule_id: String,
    pub description: String,
    pub severity: Severity,
    pub detector: Detector,
}

#[derive(Debug, Clone)]
pub struct Ruleset {
    rules: Vec<(HlsRule, Option<Regex>)>,
}

pub const DEFAULT_RULESET: &str = include_str!("default_rules.jsonl");

impl Ruleset {
    /// One JSON rule per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        let mut ids = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let bad = |m: String| Error::RulesetMalformed(format!("line {}: {m}", i + 1));
            let rule: HlsRule = serde_json::from_str(t).map_err(|e| bad(e.to_string()))?;
            if !ids.insert(rule.rule_id.clone()) {
                return Err(bad(format!("duplicate rule id `{}`", rule.rule_id)));
            }
            let re = match rule.detector.kind {
                DetectorKind::SelfCall => None,
                DetectorKind::Token => {
                    let toks: Vec<String> = rule.detector.pattern.split('|').map(|t| regex::escape(t.trim())).filter(|t| !t.is_empty()).collect();
                    if toks.is_empty() {
                        return Err(bad("token detector with no tokens".into()));
                    }
                    Some(Regex::new(&format!(r"\b(?:{})\b", toks.join("|"))).map_err(|e| bad(e.to_string()))?)
                }
                DetectorKind::Regex => Some(Regex::new(&rule.detector.pattern).map_err(|e| bad(e.to_string()))?),
            };
            rules.push((rule, re));
        }
        Ok(Ruleset { rules })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn default_rules() -> Self {
        Self::parse(DEFAULT_RULESET).expect("shipped ruleset parses")
    }

    pub fn rules(&self) -> impl Iterator<Item = &HlsRule> {
        self.rules.iter().map(|(r, _)| r)
    }

    /// Rule descriptions, one per line, for optimizer prompts.
    pub fn guidelines(&self) -> String {
        self.rules().map(|r| format!("{} ({:?}): {}\n", r.rule_id, r.severity, r.description)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule_id: String,
    pub severity: Severity,
    /// 1-based.
    pub line: usize,
    pub excerpt: String,
    pub subfunction: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LintReport {
    pub violations: Vec<Violation>,
    pub clean: bool,
}

impl LintReport {
    pub fn blocking(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| v.severity == Severity::Blocking)
    }
}

fn owner(source: &IntegratedSource, line0: usize) -> Option<String> {
    source.index.iter().find(|(_, s)| s.start_line <= line0 && line0 < s.end_line).map(|(n, _)| n.clone())
}

pub fn lint_for_hls(source: &IntegratedSource, rules: &Ruleset) -> Result<LintReport> {
    if source.level != CodeLevel::Synth {
        return Err(Error::Precondition(format!("HLS lint applies to SYNTH sources, not {}", source.level)));
    }
    let masked = mask_c_like(&source.text);
    let raw_lines: Vec<&str> = source.text.lines().collect();
    let masked_lines: Vec<&str> = masked.lines().collect();
    let mut violations = Vec::new();
    for (rule, re) in &rules.rules {
        let lines = if rule.detector.scope == DetectorScope::Raw { &raw_lines } else { &masked_lines };
        let mut push = |i: usize| {
            violations.push(Violation {
                rule_id: rule.rule_id.clone(),
                severity: rule.severity,
                line: i + 1,
                excerpt: raw_lines.get(i).map(|l| l.trim().to_string()).unwrap_or_default(),
                subfunction: owner(source, i),
            })
        };
        match re {
            Some(re) => {
                for (i, l) in lines.iter().enumerate() {
                    if re.is_match(l) {
                        push(i);
                    }
                }
            }
            None => {
                for (name, span) in &source.index {
                    let call = Regex::new(&format!(r"\b{}\s*\(", regex::escape(name))).expect("escaped name");
                    // the header line declares the name; look only at the body
                    for i in span.start_line + 1..span.end_line {
                        if lines.get(i).is_some_and(|l| call.is_match(l)) {
                            push(i);
                        }
                    }
                }
            }
        }
    }
    violations.sort_by(|a, b| (a.line, &a.rule_id).cmp(&(b.line, &b.rule_id)));
    let clean = !violations.iter().any(|v| v.severity == Severity::Blocking);
    Ok(LintReport { violations, clean })
}

const OPTIMIZER_SYSTEM: &str = "You adapt one C++ function for high-level synthesis without changing its behavior. Reply with the complete function between two lines of exactly 20 asterisks, the first line inside being `SUBFUNCTION: <name>`.";

pub struct HlsBudget {
    pub rounds: u32,
}

/// Runs lint→patch rounds until the source is clean or the round budget is
/// spent. `passing` reports which verification cases pass for a candidate
/// source; a round that loses any previously passing case is rolled back.
/// `source` always holds the latest committed state.
pub fn optimize_for_hls(
    s: &mut dyn Session,
    source: &mut IntegratedSource,
    report: &LintReport,
    rules: &Ruleset,
    budget: &HlsBudget,
    guidance: &[String],
    passing: &mut dyn FnMut(&mut dyn Session, &IntegratedSource) -> Result<BTreeSet<String>>,
) -> Result<()> {
    if report.clean {
        return Err(Error::Precondition("optimize_for_hls needs a report with blocking violations".into()));
    }
    if budget.rounds == 0 {
        return Err(Error::Precondition("HLS budget must be at least 1".into()));
    }
    let baseline = passing(s, source)?;
    let mut report = report.clone();
    for round in 1..=budget.rounds {
        let mut by_fn: BTreeMap<String, Vec<&Violation>> = BTreeMap::new();
        for v in report.blocking() {
            if let Some(f) = &v.subfunction {
                by_fn.entry(f.clone()).or_default().push(v);
            }
        }
        let mut candidate = source.clone();
        let mut patched = Vec::new();
        let mut problems = Vec::new();
        // index order follows file order, which is plan order
        let mut order: Vec<(&String, usize)> = candidate.index.iter().map(|(n, sp)| (n, sp.start_line)).collect();
        order.sort_by_key(|(_, l)| *l);
        let order: Vec<String> = order.into_iter().map(|(n, _)| n.clone()).filter(|n| by_fn.contains_key(n)).collect();
        for name in order {
            let list: String = by_fn[&name].iter().map(|v| format!("- line {} {}: {}\n", v.line, v.rule_id, v.excerpt)).collect();
            let mut user = format!(
                "{}\nGuidelines:\n{}\nViolations:\n{list}\nFunction:\n{}",
                wire::header(&[("task", "hls-optimize"), ("subfunction", &name), ("round", &round.to_string())]),
                rules.guidelines(),
                candidate.extract(&name).unwrap_or_default()
            );
            for g in guidance {
                user.push_str(&format!("\nOperator guidance: {g}\n"));
            }
            let request = CompletionRequest::new(Agent::CodeOptimizer, "hls-optimize", vec![ChatMessage::system(OPTIMIZER_SYSTEM), ChatMessage::user(user)]);
            let text = s.complete(request)?.text;
            let applied = parse_patch(&text).and_then(|b| {
                if b.subfunction_name != name {
                    return Err(Error::PatchBodyMismatch { name: name.clone(), reason: format!("label names `{}`", b.subfunction_name) });
                }
                let next = apply_patch(&candidate, &b)?;
                Ok((b, next))
            });
            match applied {
                Ok((b, next)) => {
                    candidate = next;
                    patched.push(b);
                }
                Err(e) => problems.push(format!("{name}: {e}")),
            }
        }
        let mut regressions = Vec::new();
        if !patched.is_empty() {
            let now = passing(s, &candidate)?;
            regressions = baseline.difference(&now).cloned().collect();
        }
        let outcome = if patched.is_empty() {
            HlsRoundOutcome::NoPatch
        } else if regressions.is_empty() {
            HlsRoundOutcome::Applied
        } else {
            HlsRoundOutcome::BehaviorRegression
        };
        s.emit(Event::HlsOptimized(HlsOptimized {
            round,
            outcome,
            patched: patched.iter().map(|b| b.subfunction_name.clone()).collect(),
            regressions: regressions.clone(),
            problems,
        }))?;
        if outcome == HlsRoundOutcome::Applied {
            let mut committed = source.clone();
            for b in &patched {
                committed = apply_patch(&committed, b)?;
                s.emit(Event::PatchApplied(PatchApplied {
                    level: CodeLevel::Synth,
                    subfunction: b.subfunction_name.clone(),
                    body: b.body.clone(),
                    content_hash: committed.content_hash(),
                    origin: PatchOrigin::Hls,
                }))?;
            }
            *source = committed;
        }
        report = lint_for_hls(source, rules)?;
        s.emit(Event::HlsLinted(HlsLinted { round, clean: report.clean, violations: report.violations.clone() }))?;
        if report.clean {
            return Ok(());
        }
    }
    Err(Error::HlsBudgetExhausted { remaining: report.blocking().count() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SynthStatus {
    Skipped,
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthOutcome {
    pub status: SynthStatus,
    pub exit_code: Option<i32>,
    pub output: String,
}

/// Hands the SYNTH source to an external command (`{file}` placeholder).
/// Only the exit status is interpreted.
pub fn invoke_synthesizer(sandbox: &Sandbox, source: &IntegratedSource, cmd_template: Option<&str>, workdir: &Path, timeout_secs: u64) -> Result<SynthOutcome> {
    let Some(cmd) = cmd_template.filter(|c| !c.trim().is_empty()) else {
        return Ok(SynthOutcome { status: SynthStatus::Skipped, exit_code: None, output: String::new() });
    };
    let ext = sandbox.toolchain().extension(CodeLevel::Synth).to_string();
    let r = sandbox.run_tool(cmd, &format!("design.{ext}"), &source.text, workdir, timeout_secs)?;
    if r.status == ExecStatus::Timeout {
        return Err(Error::Sandbox(format!("synthesizer timed out after {timeout_secs}s")));
    }
    let dir = workdir.canonicalize().map(|d| d.to_string_lossy().into_owned()).unwrap_or_default();
    let mut output = format!("{}{}", r.stdout, r.stderr);
    if !dir.is_empty() {
        output = output.replace(&dir, ".");
    }
    let output: String = output.chars().take(4_000).collect();
    Ok(SynthOutcome {
        status: if r.status == ExecStatus::Ok { SynthStatus::Ok } else { SynthStatus::Failed },
        exit_code: Some(r.exit_code),
        output,
    })
}
