//! Run state as a pure fold over the event log.

use std::collections::BTreeMap;

use serde::Serialize;

use super::config::{Budgets, NoiseConfig, RunMode};
use super::events::{Event, NoiseArtifact, RunCompleted, RunEvent, RunFailed};
use crate::error::{Error, Result};
use crate::level::CodeLevel;
use crate::patcher::{apply_patch, IntegratedSource, PatchBlock};
use crate::reflection::{InterventionRequest, RequestStatus};
use crate::understanding::{DecompositionPlan, SubFunctionSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Created,
    Understanding,
    Coding,
    Reflecting,
    Hls,
    Blocked,
    Completed,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunState {
    pub phase: Phase,
    pub target: Option<String>,
    pub doc_id: Option<String>,
    pub mode: RunMode,
    pub budgets: Option<Budgets>,
    pub noise: Option<NoiseConfig>,
    pub summaries: BTreeMap<String, String>,
    pub plan: Option<DecompositionPlan>,
    pub specs: BTreeMap<String, SubFunctionSpec>,
    /// sub-function → level → accepted version.
    pub accepted: BTreeMap<String, BTreeMap<CodeLevel, u32>>,
    pub current: Option<(String, CodeLevel)>,
    pub interventions: Vec<InterventionRequest>,
    pub pending: Option<String>,
    /// CODING_ATTEMPT count per sub-function, across levels.
    pub attempts: BTreeMap<String, u32>,
    pub reflections: BTreeMap<String, u32>,
    #[serde(skip)]
    pub sources: BTreeMap<CodeLevel, IntegratedSource>,
    pub outcome: Option<RunCompleted>,
    pub failure: Option<RunFailed>,
    pub last_seq: u64,
    #[serde(skip)]
    resume_phase: Option<Phase>,
}

/// The slice of state the live pipeline can report about itself; used to
/// cross-check the fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StateView {
    pub accepted: BTreeMap<String, BTreeMap<CodeLevel, u32>>,
    pub spec_revisions: BTreeMap<String, u32>,
    pub source_hashes: BTreeMap<CodeLevel, String>,
    pub pending: Option<String>,
}

impl Default for RunState {
    fn default() -> Self {
        RunState {
            phase: Phase::Created,
            target: None,
            doc_id: None,
            mode: RunMode::Pipeline,
            budgets: None,
            noise: None,
            summaries: BTreeMap::new(),
            plan: None,
            specs: BTreeMap::new(),
            accepted: BTreeMap::new(),
            current: None,
            interventions: Vec::new(),
            pending: None,
            attempts: BTreeMap::new(),
            reflections: BTreeMap::new(),
            sources: CodeLevel::ALL.into_iter().map(|l| (l, IntegratedSource::skeleton(l))).collect(),
            outcome: None,
            failure: None,
            last_seq: 0,
            resume_phase: None,
        }
    }
}

impl RunState {
    pub fn fold(log: &[RunEvent]) -> Result<Self> {
        let mut s = RunState::default();
        for ev in log {
            s.apply(ev)?;
        }
        Ok(s)
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.phase, Phase::Completed | Phase::Failed)
    }

    pub fn correct(&self) -> Option<bool> {
        self.outcome.as_ref().and_then(|o| o.correct)
    }

    pub fn intervention(&self, rid: &str) -> Option<&InterventionRequest> {
        self.interventions.iter().find(|r| r.request_id == rid)
    }

    pub fn view(&self) -> StateView {
        StateView {
            accepted: self.accepted.clone(),
            spec_revisions: self.specs.iter().map(|(k, v)| (k.clone(), v.revision)).collect(),
            source_hashes: self.sources.iter().map(|(l, s)| (*l, s.content_hash())).collect(),
            pending: self.pending.clone(),
        }
    }

    pub fn apply(&mut self, ev: &RunEvent) -> Result<()> {
        let corrupt = |m: String| Error::LogCorrupt(format!("seq {}: {m}", ev.seq));
        if self.is_terminal() {
            return Err(corrupt(format!("{} after a terminal event", ev.kind)));
        }
        if self.phase == Phase::Blocked && ev.kind != "INTERVENTION_ANSWERED" {
            return Err(corrupt(format!("{} while an intervention is pending", ev.kind)));
        }
        match ev.event()? {
            Event::RunStarted(e) => {
                if ev.seq != 1 {
                    return Err(corrupt("RUN_STARTED must be the first event".into()));
                }
                self.target = Some(e.target);
                self.doc_id = Some(e.doc_id);
                self.mode = e.mode;
                self.budgets = Some(e.budgets);
                self.noise = e.noise;
                self.phase = Phase::Understanding;
            }
            Event::SectionSummarized(e) => {
                self.summaries.insert(e.section_id, e.summary);
            }
            Event::PlanAccepted(e) => self.plan = Some(e.plan),
            Event::SpecAccepted(e) => {
                self.specs.insert(e.spec.name.clone(), e.spec);
            }
            Event::CodingAttempt(e) => {
                *self.attempts.entry(e.subfunction.clone()).or_default() += 1;
                self.current = Some((e.subfunction, e.level));
                self.phase = Phase::Coding;
            }
            Event::LevelAccepted(e) => {
                self.accepted.entry(e.subfunction).or_default().insert(e.level, e.version);
            }
            Event::LevelExhausted(e) => {
                self.current = Some((e.subfunction, e.level));
                self.phase = Phase::Reflecting;
            }
            Event::ProviderCall(_) => {}
            Event::PatchApplied(e) => {
                let src = self.sources.get(&e.level).expect("all levels seeded");
                let next = apply_patch(src, &PatchBlock { subfunction_name: e.subfunction.clone(), body: e.body })
                    .map_err(|err| corrupt(format!("patch for {} does not apply: {err}", e.subfunction)))?;
                if next.content_hash() != e.content_hash {
                    return Err(corrupt(format!("{} {} content hash mismatch", e.subfunction, e.level)));
                }
                self.sources.insert(e.level, next);
            }
            Event::ReflectionDecided(e) => {
                if !e.forced {
                    *self.reflections.entry(e.subfunction).or_default() += 1;
                }
            }
            Event::InterventionRequested(e) => {
                if self.pending.is_some() {
                    return Err(corrupt("second intervention while one is pending".into()));
                }
                self.interventions.push(InterventionRequest {
                    request_id: e.request_id.clone(),
                    subfunction: e.subfunction,
                    observations: e.observations,
                    attempts: e.attempts,
                    questions: e.questions,
                    created_at: ev.timestamp.clone(),
                    status: RequestStatus::Pending,
                    answer: None,
                });
                self.pending = Some(e.request_id);
                self.resume_phase = Some(self.phase);
                self.phase = Phase::Blocked;
            }
            Event::InterventionAnswered(e) => {
                if self.pending.as_deref() != Some(e.request_id.as_str()) {
                    return Err(corrupt(format!("answer for `{}` which is not pending", e.request_id)));
                }
                let req = self.interventions.iter_mut().find(|r| r.request_id == e.request_id).expect("pending is recorded");
                req.status = RequestStatus::Answered;
                req.answer = Some(e.answer);
                self.pending = None;
                self.phase = self.resume_phase.take().unwrap_or(Phase::Coding);
            }
            Event::PromptOptimized(_) => {}
            Event::NoiseInjected(e) => match e.artifact {
                NoiseArtifact::Spec { spec } => {
                    self.specs.insert(spec.name.clone(), spec);
                }
                NoiseArtifact::Unit { level, version, .. } => {
                    self.accepted.entry(e.subfunction).or_default().insert(level, version);
                }
            },
            Event::HlsLinted(_) | Event::HlsOptimized(_) | Event::SynthInvoked(_) => {
                self.current = None;
                self.phase = Phase::Hls;
            }
            Event::RunCompleted(e) => {
                self.outcome = Some(e);
                self.phase = Phase::Completed;
            }
            Event::RunFailed(e) => {
                self.failure = Some(e);
                self.phase = Phase::Failed;
            }
        }
        self.last_seq = ev.seq;
        Ok(())
    }
}
