//! The deterministic run driver. It is re-executed from the top on every
//! step; the journal makes already-recorded work free.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use super::config::{NoiseStage, RunConfig, RunMode};
use super::events::*;
use super::journal::Journal;
use super::state::StateView;
use super::store::{intervention_path, write_json, write_text};
use crate::coding::{
    commit_unit, derive_tests, fill_expected, run_level_loop, signature_of, CodeUnit, LevelOutcome, LoopBudgets, LoopInput,
    PromptState, TestCase, TestOracle, TestOrigin, TestSuite, VerificationReport,
};
use crate::document::{render_context, GoldenVectors, SpecDocument};
use crate::error::{Error, Result};
use crate::hls::{invoke_synthesizer, lint_for_hls, optimize_for_hls, HlsBudget, Ruleset, SynthOutcome, SynthStatus};
use crate::level::CodeLevel;
use crate::patcher::{parse_patch, sha256_hex, IntegratedSource};
use crate::provider::{Agent, ChatMessage, CompletionRequest};
use crate::reflection::{
    analyze_trajectory, apply_answer, build_intervention_request, decide_route, mechanical_request, InterventionRequest,
    ReflectionDecision, Route, RouteScope, TrajectorySummary,
};
use crate::sandbox::{run_testcases, CaseStatus, EntrySignature, Sandbox};
use crate::session::Session;
use crate::understanding::{
    augment_subfunction, decompose, parse_spec_response, revise_instructions, summarize_sections, DecompositionPlan, PlanItem,
    SectionSummary, SubFunctionSpec, UnderstandingBudgets,
};
use crate::wire;

/// Why the pipeline stopped short of the end.
pub(crate) enum Halt {
    /// A phase boundary was reached after new events were recorded.
    Yield,
    Blocked(String),
    Fail(Error),
}

impl From<Error> for Halt {
    fn from(e: Error) -> Self {
        Halt::Fail(e)
    }
}

type Flow<T = ()> = std::result::Result<T, Halt>;
type Key = (String, CodeLevel);

pub(crate) struct Env {
    pub cfg: RunConfig,
    pub doc: SpecDocument,
    pub golden: Option<GoldenVectors>,
    pub dir: PathBuf,
    pub rules: Ruleset,
    pub sandbox: Sandbox,
    pub yield_at_checkpoints: bool,
}

pub(crate) fn run_started_event(cfg: &RunConfig, doc: &SpecDocument) -> Event {
    Event::RunStarted(RunStarted {
        target: cfg.target.clone(),
        doc_id: doc.doc_id.clone(),
        mode: cfg.mode,
        budgets: cfg.budgets,
        noise: cfg.noise.clone(),
    })
}

const NOISE_SYSTEM: &str = "You are stress-testing a verification flow. Rewrite the artifact you are given so that it keeps its form, name and interface but computes a wrong result for some inputs. The change must be a plausible logic slip, never a syntax or type error. Keep the reply format you are asked for.";
const SINGLE_SHOT_SYSTEM: &str = "You implement a complete algorithm in one reply. Reply with one ```cpp block holding a C++17 translation unit (no main) that defines the requested top-level function and every helper it needs, using <cstdint> fixed-width types.";

fn noise_stage(level: CodeLevel) -> NoiseStage {
    match level {
        CodeLevel::Pseudo => NoiseStage::Pseudo,
        CodeLevel::Script => NoiseStage::Script,
        CodeLevel::Synth => NoiseStage::Synth,
    }
}

fn golden_signature(g: &GoldenVectors) -> Option<EntrySignature> {
    let first = g.cases.first()?;
    Some(EntrySignature {
        name: g.entry.clone(),
        inputs: first.inputs.len(),
        outputs_hex: first.expected.iter().map(|e| e.trim().to_ascii_lowercase().starts_with("0x")).collect(),
    })
}

pub(crate) struct Pipeline<'e> {
    env: &'e Env,
    summaries: Vec<SectionSummary>,
    plan: Option<DecompositionPlan>,
    specs: BTreeMap<String, SubFunctionSpec>,
    committed: BTreeMap<CodeLevel, IntegratedSource>,
    units: BTreeMap<Key, CodeUnit>,
    versions: BTreeMap<Key, u32>,
    prompts: BTreeMap<Key, PromptState>,
    suites: BTreeMap<Key, TestSuite>,
    /// Cross-entry cases planted by REVISE_PRIOR.
    seeds: BTreeMap<Key, Vec<TestCase>>,
    oracle_texts: BTreeMap<String, String>,
    /// Last failing candidate of a sub-function whose loop ran out, so
    /// cross-entry cases can call it while a prior unit is being revised.
    overlay: BTreeMap<Key, CodeUnit>,
    feedback: BTreeMap<String, Vec<String>>,
    rounds: BTreeMap<Key, u32>,
    reflections: BTreeMap<String, u32>,
    next_request: u32,
    noise_done: bool,
    pending: Option<String>,
}

impl<'e> Pipeline<'e> {
    pub fn new(env: &'e Env) -> Self {
        Pipeline {
            env,
            summaries: Vec::new(),
            plan: None,
            specs: BTreeMap::new(),
            committed: CodeLevel::ALL.into_iter().map(|l| (l, IntegratedSource::skeleton(l))).collect(),
            units: BTreeMap::new(),
            versions: BTreeMap::new(),
            prompts: BTreeMap::new(),
            suites: BTreeMap::new(),
            seeds: BTreeMap::new(),
            oracle_texts: BTreeMap::new(),
            overlay: BTreeMap::new(),
            feedback: BTreeMap::new(),
            rounds: BTreeMap::new(),
            reflections: BTreeMap::new(),
            next_request: 0,
            noise_done: false,
            pending: None,
        }
    }

    pub fn view(&self) -> StateView {
        let mut accepted: BTreeMap<String, BTreeMap<CodeLevel, u32>> = BTreeMap::new();
        for ((n, l), u) in &self.units {
            accepted.entry(n.clone()).or_default().insert(*l, u.version);
        }
        StateView {
            accepted,
            spec_revisions: self.specs.iter().map(|(k, v)| (k.clone(), v.revision)).collect(),
            source_hashes: self.committed.iter().map(|(l, s)| (*l, s.content_hash())).collect(),
            pending: self.pending.clone(),
        }
    }

    fn cfg(&self) -> &RunConfig {
        &self.env.cfg
    }

    fn ubudgets(&self) -> UnderstandingBudgets {
        UnderstandingBudgets { max_rounds: self.cfg().budgets.augment_max_rounds, context_chars: self.cfg().context.chars }
    }

    fn checkpoint(&self, j: &Journal) -> Flow {
        if self.env.yield_at_checkpoints && j.live_count() > 0 {
            return Err(Halt::Yield);
        }
        Ok(())
    }

    fn plan(&self) -> &DecompositionPlan {
        self.plan.as_ref().expect("plan accepted before coding")
    }

    pub fn run(&mut self, j: &mut Journal) -> Flow {
        j.emit(run_started_event(self.cfg(), &self.env.doc))?;
        if self.cfg().mode == RunMode::SingleShot {
            return self.single_shot(j);
        }
        let ub = self.ubudgets();
        self.summaries = summarize_sections(j, &self.env.doc, &ub)?;
        self.checkpoint(j)?;

        let plan = decompose(j, &self.env.doc, &self.summaries, &self.cfg().target, &ub)?;
        j.emit(Event::PlanAccepted(PlanAccepted { plan: plan.clone() }))?;
        write_json(&self.env.dir.join("plan.json"), &plan)?;
        self.plan = Some(plan.clone());
        self.checkpoint(j)?;

        for item in &plan.sub_functions {
            let spec = self.augment(j, item)?;
            j.emit(Event::SpecAccepted(SpecAccepted { spec: spec.clone() }))?;
            self.set_spec(spec)?;
            if self.noise_applies(NoiseStage::Understanding, &item.name) {
                self.noise_spec(j, &item.name)?;
            }
            self.checkpoint(j)?;
        }

        for name in plan.names() {
            for level in CodeLevel::ALL {
                self.code(j, &name, level)?;
            }
        }
        self.hls(j)?;
        self.final_verification(j)
    }

    // ---- understanding -------------------------------------------------

    fn augment(&mut self, j: &mut Journal, item: &PlanItem) -> Flow<SubFunctionSpec> {
        let ub = self.ubudgets();
        let mut guidance: Vec<String> = Vec::new();
        loop {
            match augment_subfunction(j, item, &self.env.doc, &self.summaries, &ub, &guidance) {
                Ok(spec) => return Ok(spec),
                Err(Error::AugmentBudgetExhausted { name, feedback }) => {
                    let answer = self.escalate_mechanical(
                        j,
                        Some(&name),
                        None,
                        feedback,
                        format!("{} verification round(s) without an accepted dictionary", ub.max_rounds),
                        format!("The dictionary for `{name}` could not be verified against the document. What should it state?"),
                    )?;
                    guidance.push(answer);
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn revise_spec(&mut self, j: &mut Journal, old: &SubFunctionSpec, report: &str) -> Flow<SubFunctionSpec> {
        let ub = self.ubudgets();
        let mut report = report.to_string();
        loop {
            match revise_instructions(j, old, &report, &self.env.doc, &self.summaries, &ub) {
                Ok(spec) => return Ok(spec),
                Err(Error::AugmentBudgetExhausted { name, feedback }) => {
                    let answer = self.escalate_mechanical(
                        j,
                        Some(&name),
                        None,
                        feedback,
                        "revised dictionary was not accepted".into(),
                        format!("How should the dictionary for `{name}` be corrected?"),
                    )?;
                    report.push_str(&format!("\nOperator guidance: {answer}\n"));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn set_spec(&mut self, spec: SubFunctionSpec) -> Result<()> {
        write_json(&self.env.dir.join("specs").join(format!("{}.rev{}.json", spec.name, spec.revision)), &spec)?;
        self.specs.insert(spec.name.clone(), spec);
        Ok(())
    }

    // ---- noise ---------------------------------------------------------

    fn noise_applies(&self, stage: NoiseStage, name: &str) -> bool {
        let Some(n) = &self.cfg().noise else { return false };
        if self.noise_done || n.stage != stage {
            return false;
        }
        match &n.subfunction {
            Some(t) => t == name,
            None => self.plan.as_ref().and_then(|p| p.sub_functions.first()).is_some_and(|f| f.name == name),
        }
    }

    fn noise_request(&self, stage: NoiseStage, name: &str, body: String) -> CompletionRequest {
        let stage_s = serde_json::to_value(stage).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let user = format!("{}\n{body}", wire::header(&[("task", "inject-noise"), ("subfunction", name), ("stage", &stage_s)]));
        CompletionRequest::new(Agent::NoiseInjector, "inject-noise", vec![ChatMessage::system(NOISE_SYSTEM), ChatMessage::user(user)])
    }

    fn noise_spec(&mut self, j: &mut Journal, name: &str) -> Flow {
        let old = self.specs[name].clone();
        let body = format!("Reply with one ```json block holding the revised dictionary.\n{}", wire::pretty(&old));
        let text = j.complete(self.noise_request(NoiseStage::Understanding, name, body))?.text;
        let mut spec = parse_spec_response(&text, name)?;
        spec.depends_on = old.depends_on.clone();
        spec.revision = old.revision;
        j.emit(Event::NoiseInjected(NoiseInjected {
            stage: NoiseStage::Understanding,
            subfunction: name.to_string(),
            artifact: NoiseArtifact::Spec { spec: spec.clone() },
        }))?;
        self.noise_done = true;
        self.set_spec(spec)?;
        Ok(())
    }

    fn noise_unit(&mut self, j: &mut Journal, unit: &CodeUnit) -> Flow<CodeUnit> {
        let stage = noise_stage(unit.level);
        let body = format!(
            "Level: {}\nReply with the complete definition between two lines of exactly 20 asterisks, the first line inside being `SUBFUNCTION: {}`.\n{}",
            unit.level, unit.subfunction, unit.source_text
        );
        let text = j.complete(self.noise_request(stage, &unit.subfunction, body))?.text;
        let block = parse_patch(&text)?;
        if block.subfunction_name != unit.subfunction {
            return Err(Error::PatchBodyMismatch { name: unit.subfunction.clone(), reason: format!("label names `{}`", block.subfunction_name) }.into());
        }
        let v = self.versions.entry((unit.subfunction.clone(), unit.level)).or_insert(0);
        *v += 1;
        let noisy = CodeUnit { source_text: block.body, version: *v, ..unit.clone() };
        j.emit(Event::NoiseInjected(NoiseInjected {
            stage,
            subfunction: unit.subfunction.clone(),
            artifact: NoiseArtifact::Unit { level: unit.level, version: noisy.version, body: noisy.source_text.clone() },
        }))?;
        self.noise_done = true;
        Ok(noisy)
    }

    // ---- interventions -------------------------------------------------

    fn new_request_id(&mut self) -> String {
        self.next_request += 1;
        format!("iv-{}", self.next_request)
    }

    fn request(&mut self, j: &mut Journal, req: &InterventionRequest, level: Option<CodeLevel>) -> Flow {
        let live = !j.replaying();
        j.emit(Event::InterventionRequested(InterventionRequested {
            request_id: req.request_id.clone(),
            subfunction: req.subfunction.clone(),
            level,
            observations: req.observations.clone(),
            attempts: req.attempts.clone(),
            questions: req.questions.clone(),
        }))?;
        if live {
            let mut stored = req.clone();
            stored.created_at = j.all_events().last().map(|e| e.timestamp.clone()).unwrap_or_default();
            write_json(&intervention_path(&self.env.dir, &req.request_id), &stored)?;
        }
        Ok(())
    }

    fn await_answer(&mut self, j: &mut Journal, rid: &str) -> Flow<String> {
        match j.await_answer(rid)? {
            Some(a) => Ok(a),
            None => {
                self.pending = Some(rid.to_string());
                Err(Halt::Blocked(rid.to_string()))
            }
        }
    }

    fn escalate_mechanical(
        &mut self,
        j: &mut Journal,
        subfunction: Option<&str>,
        level: Option<CodeLevel>,
        observations: String,
        attempts: String,
        question: String,
    ) -> Flow<String> {
        let rid = self.new_request_id();
        let req = mechanical_request(&rid, subfunction, observations, attempts, question);
        self.request(j, &req, level)?;
        self.await_answer(j, &rid)
    }

    // ---- tests ---------------------------------------------------------

    fn write_suite(&self, key: &Key) -> Result<()> {
        let Some(suite) = self.suites.get(key) else { return Ok(()) };
        let mut out = suite.clone();
        out.cases.extend(self.seeds.get(key).into_iter().flatten().cloned());
        out.oracles = out
            .cases
            .iter()
            .filter_map(|c| c.oracle.as_ref())
            .filter_map(|o| self.oracle_texts.get(&o.source_hash).map(|t| (o.source_hash.clone(), t.clone())))
            .collect();
        write_json(&self.env.dir.join("tests").join(format!("{}.{}.json", key.0, key.1)), &out)
    }

    fn ensure_suite(&mut self, j: &mut Journal, name: &str, level: CodeLevel) -> Flow {
        let key = (name.to_string(), level);
        let spec = self.specs[name].clone();
        if level == CodeLevel::Pseudo || self.suites.get(&key).is_some_and(|s| s.spec_revision == spec.revision) {
            return Ok(());
        }
        let chars = self.cfg().context.chars;
        let cases = match level {
            CodeLevel::Pseudo => unreachable!(),
            CodeLevel::Script => match derive_tests(j, &spec, level, TestOracle::Document(&self.env.doc), chars) {
                Ok(c) => c,
                Err(Error::NoTestsAvailable(_)) => Vec::new(),
                Err(e) => return Err(e.into()),
            },
            CodeLevel::Synth => {
                self.ensure_suite(j, name, CodeLevel::Script)?;
                let mut cases: Vec<TestCase> = self.suites[&(name.to_string(), CodeLevel::Script)]
                    .cases
                    .iter()
                    .filter(|c| c.origin == TestOrigin::Spec)
                    .map(|c| TestCase { level: CodeLevel::Synth, ..c.clone() })
                    .collect();
                let oracle = &self.committed[&CodeLevel::Script];
                let version = self.units.get(&(name.to_string(), CodeLevel::Script)).map(|u| u.version).unwrap_or(0);
                match derive_tests(j, &spec, level, TestOracle::HigherLevel { source: oracle, version }, chars) {
                    Ok(hl) => {
                        self.oracle_texts.insert(sha256_hex(&oracle.text), oracle.text.clone());
                        cases.extend(hl);
                    }
                    Err(Error::NoTestsAvailable(_)) => {}
                    Err(e) => return Err(e.into()),
                }
                cases
            }
        };
        self.suites.insert(
            key.clone(),
            TestSuite { subfunction: name.to_string(), level, spec_revision: spec.revision, cases, oracles: BTreeMap::new() },
        );
        self.write_suite(&key)?;
        Ok(())
    }

    fn tests_for(&mut self, j: &mut Journal, name: &str, level: CodeLevel) -> Flow<Vec<TestCase>> {
        if level == CodeLevel::Pseudo {
            return Ok(Vec::new());
        }
        self.ensure_suite(j, name, level)?;
        let key = (name.to_string(), level);
        let mut tests = self.suites[&key].cases.clone();
        let ids: BTreeSet<String> = tests.iter().map(|t| t.id.clone()).collect();
        tests.extend(self.seeds.get(&key).into_iter().flatten().filter(|c| !ids.contains(&c.id)).cloned());
        Ok(tests)
    }

    /// Committed source plus overlay candidates that `tests` call into.
    fn trial_base(&self, name: &str, level: CodeLevel, tests: &[TestCase]) -> Result<IntegratedSource> {
        let mut base = self.committed[&level].clone();
        let entries: BTreeSet<&str> = tests.iter().filter_map(|t| t.entry.as_deref()).collect();
        for ((n, l), u) in &self.overlay {
            if *l == level && n != name && entries.contains(n.as_str()) && !base.index.contains_key(n) {
                base = commit_unit(&base, u)?;
            }
        }
        Ok(base)
    }

    fn sigs(&self) -> impl Fn(&str) -> Option<EntrySignature> + '_ {
        move |n: &str| self.specs.get(n).map(signature_of)
    }

    // ---- coding --------------------------------------------------------

    fn code(&mut self, j: &mut Journal, name: &str, level: CodeLevel) -> Flow {
        if self.units.contains_key(&(name.to_string(), level)) {
            return Ok(());
        }
        while !self.level_pass(j, name, level, None)? {}
        Ok(())
    }

    /// Re-runs an accepted (or pending) level starting from `seed`.
    fn rerun(&mut self, j: &mut Journal, name: &str, level: CodeLevel, seed: Option<(CodeUnit, String)>) -> Flow {
        let mut seed = seed;
        while !self.level_pass(j, name, level, seed.take())? {}
        Ok(())
    }

    /// One level loop; `true` when the level was accepted. On exhaustion
    /// the reflection route has been carried out before returning `false`.
    fn level_pass(&mut self, j: &mut Journal, name: &str, level: CodeLevel, seed: Option<(CodeUnit, String)>) -> Flow<bool> {
        let key = (name.to_string(), level);
        let spec = self.specs[name].clone();
        let tests = self.tests_for(j, name, level)?;
        let base = self.trial_base(name, level, &tests)?;
        let higher = level.higher().and_then(|h| self.units.get(&(name.to_string(), h)).cloned());
        let feedback = self.feedback.get(name).cloned().unwrap_or_default();
        let round = *self.rounds.entry(key.clone()).or_insert(1);
        let b = self.cfg().budgets;
        let outcome = {
            let specs = &self.specs;
            let sigs = |n: &str| specs.get(n).map(signature_of);
            let input = LoopInput {
                spec: &spec,
                level,
                base: &base,
                higher: higher.as_ref(),
                tests: &tests,
                sigs: &sigs,
                budgets: LoopBudgets { max_attempts: b.max_attempts_per_level, optimizer_trigger: b.optimizer_trigger },
                feedback: &feedback,
                round,
                seed,
            };
            let prompt = self.prompts.entry(key.clone()).or_default();
            let version = self.versions.entry(key.clone()).or_insert(0);
            run_level_loop(j, &input, prompt, version)?
        };
        match outcome {
            LevelOutcome::Accepted { unit, attempts, .. } => {
                self.accept(j, name, level, unit, attempts, round)?;
                self.checkpoint(j)?;
                Ok(true)
            }
            LevelOutcome::Exhausted { report, attempts, last_unit } => {
                j.emit(Event::LevelExhausted(LevelExhausted {
                    subfunction: name.to_string(),
                    level,
                    round,
                    attempts,
                    suspicion: report.suspicion,
                    failing: report.failing_ids().into_iter().map(String::from).collect(),
                }))?;
                if let Some(u) = last_unit {
                    self.overlay.insert(key, u);
                }
                self.checkpoint(j)?;
                self.reflect(j, name, level, &tests, &report)?;
                Ok(false)
            }
        }
    }

    fn accept(&mut self, j: &mut Journal, name: &str, level: CodeLevel, unit: CodeUnit, attempts: u32, round: u32) -> Flow {
        j.emit(Event::LevelAccepted(LevelAccepted { subfunction: name.to_string(), level, version: unit.version, round, attempts }))?;
        let (unit, origin) = if self.noise_applies(noise_stage(level), name) {
            (self.noise_unit(j, &unit)?, PatchOrigin::Noise)
        } else {
            (unit, PatchOrigin::Coding)
        };
        let src = commit_unit(&self.committed[&level], &unit)?;
        j.emit(Event::PatchApplied(PatchApplied {
            level,
            subfunction: name.to_string(),
            body: unit.source_text.clone(),
            content_hash: src.content_hash(),
            origin,
        }))?;
        self.set_committed(level, src)?;
        let key = (name.to_string(), level);
        self.overlay.remove(&key);
        self.units.insert(key, unit);
        Ok(())
    }

    fn set_committed(&mut self, level: CodeLevel, src: IntegratedSource) -> Result<()> {
        let ext = self.env.sandbox.toolchain().extension(level).to_string();
        write_text(&self.env.dir.join("build").join(level.as_str()).join(format!("main.{ext}")), &src.text)?;
        self.committed.insert(level, src);
        Ok(())
    }

    // ---- reflection ----------------------------------------------------

    fn scope(&self, name: &str, level: CodeLevel) -> RouteScope {
        let plan = self.plan();
        let pos = plan.position(name).unwrap_or(plan.sub_functions.len());
        RouteScope {
            current: name.to_string(),
            accepted: plan.sub_functions[..pos]
                .iter()
                .filter(|i| self.units.contains_key(&(i.name.clone(), level)))
                .map(|i| i.name.clone())
                .collect(),
            current_has_higher: level.higher().is_some_and(|h| self.units.contains_key(&(name.to_string(), h))),
        }
    }

    fn bump_round(&mut self, name: &str, level: CodeLevel) {
        *self.rounds.entry((name.to_string(), level)).or_insert(1) += 1;
    }

    fn push_feedback(&mut self, name: &str, text: &str) {
        if !text.trim().is_empty() {
            self.feedback.entry(name.to_string()).or_default().push(text.trim().to_string());
        }
    }

    fn reflect(&mut self, j: &mut Journal, name: &str, level: CodeLevel, tests: &[TestCase], report: &VerificationReport) -> Flow {
        let scope = self.scope(name, level);
        let round = self.rounds[&(name.to_string(), level)];
        let history = j.history();
        let summary = analyze_trajectory(j, &history, &scope, level.as_str(), round)?;
        let used = self.reflections.get(name).copied().unwrap_or(0);
        let (decision, forced) = if used >= self.cfg().budgets.max_reflections_per_subfunction {
            let d = ReflectionDecision {
                route: Route::EscalateHuman,
                justification: format!("reflection budget of {used} exhausted for `{name}`"),
            };
            (d, true)
        } else {
            (decide_route(j, &summary, &scope, level.as_str(), round)?, false)
        };
        if !forced {
            self.reflections.insert(name.to_string(), used + 1);
        }
        j.emit(Event::ReflectionDecided(ReflectionDecided {
            subfunction: name.to_string(),
            level,
            round,
            decision: decision.route.clone(),
            justification: decision.justification.clone(),
            hypotheses: summary.hypotheses.clone(),
            forced,
        }))?;
        self.checkpoint(j)?;
        let route = decision.route.clone();
        self.execute_route(j, name, level, &route, &decision, &summary, &scope, tests, report)
    }

    #[allow(clippy::too_many_arguments)]
    fn execute_route(
        &mut self,
        j: &mut Journal,
        name: &str,
        level: CodeLevel,
        route: &Route,
        decision: &ReflectionDecision,
        summary: &TrajectorySummary,
        scope: &RouteScope,
        tests: &[TestCase],
        report: &VerificationReport,
    ) -> Flow {
        match route {
            Route::RegenerateCurrent { feedback } => {
                self.push_feedback(name, feedback);
            }
            Route::ReviseInstructions { target } => {
                let old = self.specs[target].clone();
                let mut why = report.describe();
                if !decision.justification.is_empty() {
                    why.push_str(&format!("\nReflection: {}\n", decision.justification));
                }
                let spec = self.revise_spec(j, &old, &why)?;
                j.emit(Event::SpecAccepted(SpecAccepted { spec: spec.clone() }))?;
                self.set_spec(spec)?;
                if target != name {
                    self.revise_prior(j, name, level, target, tests, report)?;
                }
            }
            Route::RevisePrior { target } => {
                self.revise_prior(j, name, level, target, tests, report)?;
            }
            Route::EscalateHuman => {
                let rid = self.new_request_id();
                let req = build_intervention_request(j, &rid, summary, decision, scope, level.as_str())?;
                self.request(j, &req, Some(level))?;
                let answer = self.await_answer(j, &rid)?;
                let mut req = req;
                let directive = apply_answer(&mut req, &answer, scope)?;
                match directive.route {
                    Some(r @ Route::RegenerateCurrent { .. }) => {
                        return self.execute_route(j, name, level, &r, decision, summary, scope, tests, report);
                    }
                    Some(r) => {
                        self.push_feedback(name, &directive.guidance);
                        return self.execute_route(j, name, level, &r, decision, summary, scope, tests, report);
                    }
                    None => self.push_feedback(name, &directive.guidance),
                }
            }
        }
        self.bump_round(name, level);
        Ok(())
    }

    fn revise_prior(&mut self, j: &mut Journal, name: &str, level: CodeLevel, target: &str, tests: &[TestCase], report: &VerificationReport) -> Flow {
        let revised = if target == name {
            level.higher().ok_or_else(|| Error::Precondition(format!("`{name}` has no higher level to revisit")))?
        } else {
            level
        };
        let tkey = (target.to_string(), revised);
        let Some(accepted) = self.units.get(&tkey).cloned() else {
            return Err(Error::Precondition(format!("`{target}` has no accepted {revised} unit to revise")).into());
        };
        if revised.is_executable() {
            let failing: BTreeSet<&str> = report.failing_ids().into_iter().collect();
            let existing: BTreeSet<String> = self
                .suites
                .get(&tkey)
                .map(|s| s.cases.iter().map(|c| c.id.clone()).collect())
                .unwrap_or_default();
            let seeds = self.seeds.entry(tkey.clone()).or_default();
            for c in tests.iter().filter(|c| failing.contains(c.id.as_str())) {
                if c.oracle.as_ref().is_some_and(|o| o.level == revised) {
                    continue;
                }
                if existing.contains(&c.id) || seeds.iter().any(|s| s.id == c.id) {
                    continue;
                }
                seeds.push(TestCase { level: revised, entry: Some(c.entry.clone().unwrap_or_else(|| name.to_string())), ..c.clone() });
            }
            if self.suites.contains_key(&tkey) {
                self.write_suite(&tkey)?;
            }
        }
        let problems = format!("Cases of `{name}` at {level} fail while using this unit:\n{}", report.describe());
        self.rerun(j, target, revised, Some((accepted, problems)))?;
        self.after_revision(j, target, revised, name)
    }

    /// Keeps oracles and accepted units consistent after `target` was
    /// re-accepted at `revised`.
    fn after_revision(&mut self, j: &mut Journal, target: &str, revised: CodeLevel, current: &str) -> Flow {
        if revised == CodeLevel::Script {
            let oracle = self.committed[&CodeLevel::Script].clone();
            self.oracle_texts.insert(sha256_hex(&oracle.text), oracle.text.clone());
            let keys: Vec<Key> = self.suites.keys().filter(|(_, l)| *l == CodeLevel::Synth).cloned().collect();
            for key in keys {
                let version = self.units.get(&(key.0.clone(), CodeLevel::Script)).map(|u| u.version).unwrap_or(0);
                let specs = &self.specs;
                let sigs = |n: &str| specs.get(n).map(signature_of);
                if let Some(suite) = self.suites.get_mut(&key) {
                    fill_expected(j, &mut suite.cases, &oracle, version, &sigs)?;
                }
                if let Some(seeds) = self.seeds.get_mut(&key) {
                    fill_expected(j, seeds, &oracle, version, &sigs)?;
                }
                self.write_suite(&key)?;
            }
        }
        let names = self.plan().names();
        for lvl in CodeLevel::ALL.into_iter().filter(|l| *l >= revised && l.is_executable()) {
            for n in &names {
                if n == current || (n == target && lvl == revised) {
                    continue;
                }
                let key = (n.clone(), lvl);
                let Some(unit) = self.units.get(&key).cloned() else { continue };
                let tests = self.tests_for(j, n, lvl)?;
                if tests.is_empty() {
                    continue;
                }
                let base = self.trial_base(n, lvl, &tests)?;
                let outcome = {
                    let sigs = self.sigs();
                    run_testcases(j, &base, n, &tests, &sigs)
                };
                let problems = match outcome {
                    Ok((results, _)) if results.iter().all(|r| r.status == CaseStatus::Pass) => continue,
                    Ok((results, _)) => results
                        .iter()
                        .filter(|r| r.status != CaseStatus::Pass)
                        .map(|r| format!("{} {:?}: observed {}\n", r.id, r.status, r.observed))
                        .collect::<String>(),
                    Err(Error::HarnessGenerationFailed(m)) => format!("harness generation failed: {m}"),
                    Err(e) => return Err(e.into()),
                };
                let why = format!("`{target}` was revised at {revised}; this unit no longer passes:\n{problems}");
                self.rerun(j, n, lvl, Some((unit, why)))?;
            }
        }
        Ok(())
    }

    // ---- synthesis readiness --------------------------------------------

    fn hls(&mut self, j: &mut Journal) -> Flow {
        let mut synth = self.committed[&CodeLevel::Synth].clone();
        let mut report = lint_for_hls(&synth, &self.env.rules)?;
        j.emit(Event::HlsLinted(HlsLinted { round: 0, clean: report.clean, violations: report.violations.clone() }))?;
        let mut guidance: Vec<String> = Vec::new();
        while !report.clean {
            let result = {
                let suites = &self.suites;
                let seeds = &self.seeds;
                let specs = &self.specs;
                let mut passing = |s: &mut dyn Session, src: &IntegratedSource| -> Result<BTreeSet<String>> {
                    let sigs = |n: &str| specs.get(n).map(signature_of);
                    let mut ids = BTreeSet::new();
                    for (key, suite) in suites.iter().filter(|(k, _)| k.1 == CodeLevel::Synth) {
                        let mut tests = suite.cases.clone();
                        tests.extend(seeds.get(key).into_iter().flatten().cloned());
                        if tests.is_empty() {
                            continue;
                        }
                        match run_testcases(s, src, &key.0, &tests, &sigs) {
                            Ok((results, _)) => ids.extend(
                                results.iter().filter(|r| r.status == CaseStatus::Pass).map(|r| format!("{}/{}", key.0, r.id)),
                            ),
                            Err(Error::HarnessGenerationFailed(_)) => {}
                            Err(e) => return Err(e),
                        }
                    }
                    Ok(ids)
                };
                let budget = HlsBudget { rounds: self.cfg().budgets.hls_budget };
                optimize_for_hls(j, &mut synth, &report, &self.env.rules, &budget, &guidance, &mut passing)
            };
            if synth.content_hash() != self.committed[&CodeLevel::Synth].content_hash() {
                self.set_committed(CodeLevel::Synth, synth.clone())?;
            }
            match result {
                Ok(()) => break,
                Err(Error::HlsBudgetExhausted { remaining }) => {
                    report = lint_for_hls(&synth, &self.env.rules)?;
                    let listing: String = report.blocking().map(|v| format!("line {} {}: {}\n", v.line, v.rule_id, v.excerpt)).collect();
                    let answer = self.escalate_mechanical(
                        j,
                        None,
                        Some(CodeLevel::Synth),
                        format!("{remaining} blocking HLS violation(s) remain:\n{listing}"),
                        format!("{} optimization round(s)", self.cfg().budgets.hls_budget),
                        "How should the remaining violations be resolved?".into(),
                    )?;
                    guidance.push(answer);
                }
                Err(e) => return Err(e.into()),
            }
        }
        self.checkpoint(j)?;

        let outcome = match j.peek() {
            Some(Event::SynthInvoked(rec)) => SynthOutcome { status: rec.status, exit_code: rec.exit_code, output: rec.output.clone() },
            _ => {
                let workdir = self.env.dir.join("synth");
                if workdir.exists() {
                    std::fs::remove_dir_all(&workdir).map_err(|e| Error::io("clearing synth workdir", e))?;
                }
                invoke_synthesizer(
                    &self.env.sandbox,
                    &self.committed[&CodeLevel::Synth],
                    self.cfg().hls.synthesizer_cmd.as_deref(),
                    &workdir,
                    self.cfg().hls.synthesizer_timeout_secs,
                )?
            }
        };
        j.emit(Event::SynthInvoked(SynthInvoked { status: outcome.status, exit_code: outcome.exit_code, output: outcome.output.clone() }))?;
        if outcome.status == SynthStatus::Failed {
            let tail: String = outcome.output.chars().take(500).collect();
            return Err(Error::SynthesisFailed(format!("exit code {:?}: {tail}", outcome.exit_code)).into());
        }
        self.checkpoint(j)
    }

    // ---- final verification ---------------------------------------------

    fn final_cases(&self) -> Vec<TestCase> {
        let target = &self.cfg().target;
        let mut cases: Vec<TestCase> = self
            .suites
            .get(&(target.clone(), CodeLevel::Synth))
            .map(|s| s.cases.iter().filter(|c| c.origin == TestOrigin::Spec && c.entry.is_none()).cloned().collect())
            .unwrap_or_default();
        if let Some(g) = &self.env.golden {
            for c in &g.cases {
                cases.push(TestCase {
                    id: format!("golden-{}", c.id),
                    level: CodeLevel::Synth,
                    inputs: c.inputs.clone(),
                    expected: c.expected.clone(),
                    origin: TestOrigin::Spec,
                    oracle: None,
                    entry: Some(g.entry.clone()),
                });
            }
        }
        cases
    }

    fn verify_final(&self, j: &mut Journal, source: &IntegratedSource) -> Flow {
        let cases = self.final_cases();
        let golden_sig = self.env.golden.as_ref().and_then(golden_signature);
        let completed = if cases.is_empty() {
            RunCompleted {
                correct: None,
                total: 0,
                passed: 0,
                failures: Vec::new(),
                note: "no top-level SPEC cases and no golden vectors; correctness unknown".into(),
            }
        } else {
            let sigs = |n: &str| self.specs.get(n).map(signature_of).or_else(|| golden_sig.clone().filter(|g| g.name == n));
            match run_testcases(j, source, &self.cfg().target, &cases, &sigs) {
                Ok((results, _)) => {
                    let failures: Vec<_> = results.iter().filter(|r| r.status != CaseStatus::Pass).cloned().collect();
                    RunCompleted {
                        correct: Some(failures.is_empty()),
                        total: results.len() as u32,
                        passed: (results.len() - failures.len()) as u32,
                        failures,
                        note: String::new(),
                    }
                }
                Err(e @ (Error::HarnessGenerationFailed(_) | Error::Sandbox(_) | Error::ToolchainMissing(_))) => RunCompleted {
                    correct: Some(false),
                    total: cases.len() as u32,
                    passed: 0,
                    failures: Vec::new(),
                    note: e.to_string(),
                },
                Err(e) => return Err(e.into()),
            }
        };
        j.emit(Event::RunCompleted(completed))?;
        Ok(())
    }

    fn final_verification(&mut self, j: &mut Journal) -> Flow {
        let source = self.committed[&CodeLevel::Synth].clone();
        self.verify_final(j, &source)
    }

    fn single_shot(&mut self, j: &mut Journal) -> Flow {
        let doc = &self.env.doc;
        let ctx = render_context(doc, &doc.section_ids(), self.cfg().context.chars)?;
        let target = self.cfg().target.clone();
        let mut user = format!(
            "{}\nImplement `{target}` as described below.\n",
            wire::header(&[("task", "single-shot"), ("target", &target)])
        );
        if let Some(sig) = self.env.golden.as_ref().and_then(golden_signature) {
            user.push_str(&format!("`{target}` takes {} integer argument(s) and returns {} value(s).\n", sig.inputs, sig.outputs_hex.len()));
        }
        user.push_str(&format!("\nDocument:\n{}", ctx.text));
        let request = CompletionRequest::new(
            Agent::Coder,
            "single-shot",
            vec![ChatMessage::system(SINGLE_SHOT_SYSTEM), ChatMessage::user(user).with_images(&ctx.attachments)],
        );
        let text = j.complete(request)?.text;
        let parsed = wire::fenced_block(&text, "cpp").map(|b| IntegratedSource::new(CodeLevel::Synth, b));
        match parsed {
            Some(Ok(src)) => {
                let ext = self.env.sandbox.toolchain().extension(CodeLevel::Synth).to_string();
                write_text(&self.env.dir.join("build").join("SYNTH").join(format!("main.{ext}")), &src.text)?;
                self.verify_final(j, &src)
            }
            other => {
                let why = match other {
                    Some(Err(e)) => e.to_string(),
                    _ => "reply has no ```cpp block".into(),
                };
                j.emit(Event::RunCompleted(RunCompleted {
                    correct: Some(false),
                    total: self.final_cases().len() as u32,
                    passed: 0,
                    failures: Vec::new(),
                    note: format!("single-shot reply unusable: {why}"),
                }))?;
                Ok(())
            }
        }
    }
}
