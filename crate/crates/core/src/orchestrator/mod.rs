//! Run lifecycle: start, step, answer, resume and replay. Everything is
//! derived from each run's append-only `events.log`.

pub mod config;
pub mod events;
pub mod journal;
pub mod metrics;
mod pipeline;
pub mod state;
pub mod store;

use std::path::Path;

use serde::Serialize;

use crate::document::load_bundle;
use crate::error::{Error, Result};
use crate::hls::Ruleset;
use crate::provider::{HttpProvider, Provider, ScriptedProvider};
use crate::reflection::InterventionRequest;
use crate::sandbox::Sandbox;

pub use config::RunConfig;
pub use events::{Event, RunEvent};
pub use metrics::{compute_metrics, Metrics};
pub use state::{Phase, RunState};
pub use store::RunStore;

use config::ProviderConfig;
use journal::{sandbox_root, CachedExecutor, Journal};
use pipeline::{run_started_event, Env, Halt, Pipeline};
use store::{load_config, read_log, read_log_prefix, write_json, LogWriter, METRICS_FILE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StepStatus {
    /// Progress was made and the run can continue.
    Advanced,
    Blocked { request_id: String },
    Completed { correct: Option<bool> },
    Failed { code: String },
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Events appended by this step.
    pub events: Vec<RunEvent>,
    pub status: StepStatus,
    pub state: RunState,
}

/// What clients see for a run.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub phase: Phase,
    pub target: Option<String>,
    pub current_subfunction: Option<String>,
    pub pending_intervention: bool,
    pub pending_request_id: Option<String>,
    pub last_seq: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplayReport {
    pub events: usize,
    pub sandbox_executions: u64,
}

impl Env {
    fn load(cfg: RunConfig, dir: &Path, yield_at_checkpoints: bool) -> Result<Self> {
        let bundle = load_bundle(&cfg.bundle)?;
        let rules = match &cfg.hls.ruleset {
            Some(p) => Ruleset::load(p)?,
            None => Ruleset::default_rules(),
        };
        let sandbox = Sandbox::new(cfg.toolchain.clone());
        Ok(Env { doc: bundle.document, golden: bundle.golden, dir: dir.to_path_buf(), rules, sandbox, yield_at_checkpoints, cfg })
    }
}

pub fn build_provider(cfg: &RunConfig) -> Result<Box<dyn Provider>> {
    Ok(match &cfg.provider {
        ProviderConfig::Scripted { transcript } => Box::new(ScriptedProvider::from_file(transcript)?),
        ProviderConfig::Http(h) => Box::new(HttpProvider::new(h.clone(), Some(cfg.bundle.clone()))?),
    })
}

fn write_metrics(dir: &Path, log: &[RunEvent]) -> Result<()> {
    write_json(&dir.join(METRICS_FILE), &compute_metrics(log))
}

/// Errors about the log or its replay itself; these are never recorded as
/// RUN_FAILED because the log is not a trustworthy place to put them.
fn is_infrastructure(e: &Error) -> bool {
    matches!(e, Error::ReplayDiverged { .. } | Error::LogCorrupt(_) | Error::ConcurrentWrite(_) | Error::EndOfLog | Error::Io { .. })
}

/// Validates `cfg`, allocates a run directory and records RUN_STARTED.
pub fn start_run(store: &RunStore, cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let bundle = load_bundle(&cfg.bundle)?;
    build_provider(cfg)?;
    if let Some(r) = &cfg.hls.ruleset {
        Ruleset::load(r)?;
    }
    let (id, dir) = store.create(cfg)?;
    let stored = load_config(&dir)?;
    let (mut writer, _) = LogWriter::open(&dir, &id)?;
    let rec = writer.append(&run_started_event(&stored, &bundle.document))?;
    write_metrics(&dir, &[rec])?;
    tracing::info!(run = %id, target = %cfg.target, "run started");
    Ok(id)
}

/// Advances a run to its next phase boundary.
pub fn step(store: &RunStore, run_id: &str) -> Result<StepOutcome> {
    advance(store, run_id, true)
}

/// Advances a run until it blocks or finishes.
pub fn drive(store: &RunStore, run_id: &str) -> Result<StepOutcome> {
    advance(store, run_id, false)
}

fn advance(store: &RunStore, run_id: &str, single: bool) -> Result<StepOutcome> {
    let dir = store.run_dir(run_id)?;
    let (writer, log) = LogWriter::open(&dir, run_id)?;
    let before = RunState::fold(&log)?;
    if before.is_terminal() {
        return Err(Error::RunTerminal(run_id.to_string()));
    }
    if let Some(rid) = before.pending {
        return Err(Error::BlockedOnIntervention(rid));
    }
    let cfg = load_config(&dir)?;
    let provider = build_provider(&cfg)?;
    let retry = cfg.retry.clone();
    let env = Env::load(cfg, &dir, single)?;
    let executor = CachedExecutor::new(env.sandbox.clone(), sandbox_root(&dir));
    let mut j = Journal::new(Some(writer), log, provider.as_ref(), retry, executor)?;
    let mut pipeline = Pipeline::new(&env);
    let result = pipeline.run(&mut j);

    let status = match result {
        Ok(()) => {
            if j.replaying() {
                return Err(Error::ReplayDiverged {
                    seq: j.all_events().len() as u64,
                    reason: "pipeline finished before the recorded log did".into(),
                });
            }
            match j.all_events().last().map(|e| e.event()).transpose()? {
                Some(Event::RunCompleted(c)) => StepStatus::Completed { correct: c.correct },
                _ => return Err(Error::ReplayDiverged { seq: j.all_events().len() as u64, reason: "pipeline ended without RUN_COMPLETED".into() }),
            }
        }
        Err(Halt::Yield) => StepStatus::Advanced,
        Err(Halt::Blocked(rid)) => StepStatus::Blocked { request_id: rid },
        Err(Halt::Fail(e)) if is_infrastructure(&e) => return Err(e),
        Err(Halt::Fail(e)) => {
            if j.replaying() {
                return Err(Error::ReplayDiverged {
                    seq: j.all_events().len() as u64,
                    reason: format!("replay failed with {} before the recorded log ended: {e}", e.code()),
                });
            }
            tracing::warn!(run = %run_id, code = e.code(), "run failed: {e}");
            use crate::session::Session;
            j.emit(Event::RunFailed(events::RunFailed { code: e.code().to_string(), message: e.to_string() }))?;
            StepStatus::Failed { code: e.code().to_string() }
        }
    };
    let state = RunState::fold(j.all_events())?;
    if !matches!(status, StepStatus::Failed { .. }) && state.view() != pipeline.view() {
        return Err(Error::ReplayDiverged {
            seq: state.last_seq,
            reason: "folded state disagrees with the live pipeline".into(),
        });
    }
    write_metrics(&dir, j.all_events())?;
    let events = j.new_events().to_vec();
    Ok(StepOutcome { events, status, state })
}

/// Rebuilds state from the log without advancing.
pub fn resume(store: &RunStore, run_id: &str) -> Result<RunState> {
    let dir = store.run_dir(run_id)?;
    RunState::fold(&read_log(&dir)?)
}

/// Records an operator answer for the pending request `rid`.
pub fn answer(store: &RunStore, run_id: &str, rid: &str, text: &str) -> Result<InterventionRequest> {
    let dir = store.run_dir(run_id)?;
    let (rec, req) = store::answer_intervention(&dir, rid, text)?;
    tracing::info!(run = %run_id, request = %rid, seq = rec.seq, "intervention answered");
    write_metrics(&dir, &read_log(&dir)?)?;
    Ok(req)
}

/// Re-executes a run against its own log without writing to it. Every
/// recorded event must be reproduced; sandbox work is done afresh.
pub fn replay(store: &RunStore, run_id: &str) -> Result<ReplayReport> {
    let dir = store.run_dir(run_id)?;
    let log = read_log(&dir)?;
    let n = log.len();
    let recorded_failure = match log.last().map(|e| e.event()).transpose()? {
        Some(Event::RunFailed(f)) => Some(f.code),
        _ => None,
    };
    let cfg = load_config(&dir)?;
    let provider = build_provider(&cfg)?;
    let retry = cfg.retry.clone();
    let env = Env::load(cfg, &dir, false)?;
    let scratch = std::env::temp_dir().join(format!("hwforge-replay-{}-{}", run_id, std::process::id()));
    let _ = std::fs::remove_dir_all(&scratch);
    let executor = CachedExecutor::new(env.sandbox.clone(), &scratch);
    let mut j = Journal::new(None, log, provider.as_ref(), retry, executor)?;
    let mut pipeline = Pipeline::new(&env);
    let result = pipeline.run(&mut j);
    let executions = j.executor().misses;
    let remaining = n - j.position().min(n);
    drop(j);
    let _ = std::fs::remove_dir_all(&scratch);

    let diverged = |reason: String| Error::ReplayDiverged { seq: (n - remaining) as u64 + 1, reason };
    match result {
        Ok(()) | Err(Halt::Blocked(_)) | Err(Halt::Fail(Error::EndOfLog)) if remaining == 0 => {}
        Err(Halt::Fail(e)) if remaining == 1 && recorded_failure.as_deref() == Some(e.code()) => {}
        Err(Halt::Fail(e @ (Error::ReplayDiverged { .. } | Error::LogCorrupt(_)))) => return Err(e),
        Err(Halt::Fail(e)) => return Err(diverged(format!("replay stopped with {}: {e}", e.code()))),
        _ => return Err(diverged(format!("{remaining} recorded event(s) were not reproduced"))),
    }
    Ok(ReplayReport { events: n, sandbox_executions: executions })
}

pub fn summarize(store: &RunStore, run_id: &str) -> Result<RunSummary> {
    let dir = store.run_dir(run_id)?;
    let log = read_log_prefix(&dir)?;
    let state = RunState::fold(&log)?;
    Ok(RunSummary {
        run_id: run_id.to_string(),
        phase: state.phase,
        target: state.target.clone(),
        current_subfunction: state.current.as_ref().map(|(n, _)| n.clone()),
        pending_intervention: state.pending.is_some(),
        pending_request_id: state.pending.clone(),
        last_seq: state.last_seq,
        metrics: compute_metrics(&log),
    })
}

/// Reader-side state: tolerates a write in progress.
pub fn read_state(store: &RunStore, run_id: &str) -> Result<(RunState, Vec<RunEvent>)> {
    let dir = store.run_dir(run_id)?;
    let log = read_log_prefix(&dir)?;
    Ok((RunState::fold(&log)?, log))
}
