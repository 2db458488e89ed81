//! Durable execution. Every step re-runs the deterministic pipeline from the
//! top: recorded events are matched instead of re-emitted, recorded provider
//! responses are served instead of calling out, and sandbox results come from
//! a per-execution cache. Once the recorded log is exhausted the journal goes
//! live and appends.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::events::{Event, RunEvent};
use super::store::{write_json, LogWriter};
use crate::error::{Error, Result};
use crate::level::CodeLevel;
use crate::patcher::sha256_hex;
use crate::provider::{with_retry, CompletionRequest, CompletionResult, Provider, RetryPolicy};
use crate::sandbox::{ExecutionRequest, ExecutionResult, Executor, Sandbox};
use crate::session::{provider_call_event, Session};

pub const WORKDIR_PLACEHOLDER: &str = "<workdir>";

#[derive(Serialize, Deserialize)]
struct CachedResult {
    key: String,
    result: ExecutionResult,
}

/// Numbers executions `sandbox/<seq>/` and reuses a stored result when the
/// same program, harness and toolchain come back at the same position.
pub struct CachedExecutor {
    sandbox: Sandbox,
    root: PathBuf,
    next: u64,
    pub hits: u64,
    pub misses: u64,
}

impl CachedExecutor {
    pub fn new(sandbox: Sandbox, root: impl Into<PathBuf>) -> Self {
        CachedExecutor { sandbox, root: root.into(), next: 1, hits: 0, misses: 0 }
    }

    pub fn sandbox(&self) -> &Sandbox {
        &self.sandbox
    }

    fn key(&self, level: CodeLevel, program: &str, harness: &str) -> String {
        let tc = serde_json::to_string(self.sandbox.toolchain()).unwrap_or_default();
        sha256_hex(&format!("{level}\0{program}\0{harness}\0{tc}"))
    }
}

fn sanitize(text: &str, dirs: &[String]) -> String {
    let mut out = text.to_string();
    for d in dirs {
        if !d.is_empty() {
            out = out.replace(d.as_str(), WORKDIR_PLACEHOLDER);
        }
    }
    out
}

impl Executor for CachedExecutor {
    fn run(&mut self, level: CodeLevel, program: &str, harness: &str) -> Result<ExecutionResult> {
        let dir = self.root.join(format!("{:05}", self.next));
        self.next += 1;
        let key = self.key(level, program, harness);
        let cache = dir.join("result.json");
        if let Ok(text) = fs::read_to_string(&cache) {
            if let Ok(c) = serde_json::from_str::<CachedResult>(&text) {
                if c.key == key {
                    self.hits += 1;
                    return Ok(c.result);
                }
            }
        }
        self.misses += 1;
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(format!("clearing {}", dir.display()), e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let workdir = dir.join("work");
        let mut result = self.sandbox.execute(&ExecutionRequest {
            level,
            program_text: program.to_string(),
            harness_text: harness.to_string(),
            timeout_secs: self.sandbox.toolchain().timeout_secs,
            workdir: workdir.clone(),
        })?;
        // longest first so the canonical path wins over a symlinked prefix
        let mut dirs = vec![workdir.to_string_lossy().into_owned()];
        if let Ok(c) = workdir.canonicalize() {
            dirs.push(c.to_string_lossy().into_owned());
        }
        dirs.sort_by_key(|d| std::cmp::Reverse(d.len()));
        result.stdout = sanitize(&result.stdout, &dirs);
        result.stderr = sanitize(&result.stderr, &dirs);
        result.case_log = sanitize(&result.case_log, &dirs);
        write_json(&cache, &CachedResult { key, result: result.clone() })?;
        Ok(result)
    }
}

pub struct Journal<'p> {
    writer: Option<LogWriter>,
    log: Vec<RunEvent>,
    events: Vec<Event>,
    cursor: usize,
    recorded: usize,
    provider: &'p dyn Provider,
    retry: RetryPolicy,
    executor: CachedExecutor,
}

impl<'p> Journal<'p> {
    /// `writer` is `None` for a read-only replay that stops at the end of the
    /// recorded log.
    pub fn new(writer: Option<LogWriter>, log: Vec<RunEvent>, provider: &'p dyn Provider, retry: RetryPolicy, executor: CachedExecutor) -> Result<Self> {
        let events = log.iter().map(|e| e.event()).collect::<Result<Vec<_>>>()?;
        let consumed: Vec<usize> = events
            .iter()
            .filter_map(|e| match e {
                Event::ProviderCall(c) => c.transcript_entry,
                _ => None,
            })
            .collect();
        provider.restore(&consumed)?;
        let recorded = log.len();
        Ok(Journal { writer, log, events, cursor: 0, recorded, provider, retry, executor })
    }

    pub fn replaying(&self) -> bool {
        self.cursor < self.log.len()
    }

    /// Events appended during this session.
    pub fn live_count(&self) -> usize {
        self.log.len() - self.recorded
    }

    pub fn new_events(&self) -> &[RunEvent] {
        &self.log[self.recorded..]
    }

    /// Recorded or appended events matched so far.
    pub fn position(&self) -> usize {
        self.cursor
    }

    pub fn all_events(&self) -> &[RunEvent] {
        &self.log
    }

    pub fn executor(&self) -> &CachedExecutor {
        &self.executor
    }

    /// The recorded event at the cursor, if still replaying.
    pub fn peek(&self) -> Option<&Event> {
        self.events.get(self.cursor)
    }

    fn seq_at_cursor(&self) -> u64 {
        self.cursor as u64 + 1
    }

    fn append_live(&mut self, event: Event) -> Result<()> {
        let Some(w) = self.writer.as_mut() else {
            return Err(Error::EndOfLog);
        };
        let rec = w.append(&event)?;
        self.log.push(rec);
        self.events.push(event);
        self.cursor += 1;
        Ok(())
    }

    /// Consumes a recorded INTERVENTION_ANSWERED for `rid`; `None` at the
    /// end of the log means the run must block.
    pub fn await_answer(&mut self, rid: &str) -> Result<Option<String>> {
        match self.events.get(self.cursor) {
            None => Ok(None),
            Some(Event::InterventionAnswered(a)) if a.request_id == rid => {
                let answer = a.answer.clone();
                self.cursor += 1;
                Ok(Some(answer))
            }
            Some(other) => Err(Error::ReplayDiverged {
                seq: self.seq_at_cursor(),
                reason: format!("expected the answer to `{rid}`, log has {}", other.kind()),
            }),
        }
    }
}

impl Executor for Journal<'_> {
    fn run(&mut self, level: CodeLevel, program: &str, harness: &str) -> Result<ExecutionResult> {
        self.executor.run(level, program, harness)
    }
}

impl Session for Journal<'_> {
    fn complete(&mut self, request: CompletionRequest) -> Result<CompletionResult> {
        if let Some(recorded) = self.events.get(self.cursor) {
            let seq = self.seq_at_cursor();
            return match recorded {
                Event::ProviderCall(c) if c.fingerprint == request.fingerprint() && c.agent == request.agent => {
                    let result = CompletionResult {
                        text: c.response.clone(),
                        usage: c.usage,
                        provider_id: c.provider_id.clone(),
                        transcript_entry: c.transcript_entry,
                    };
                    self.cursor += 1;
                    Ok(result)
                }
                Event::ProviderCall(c) => Err(Error::ReplayDiverged {
                    seq,
                    reason: format!("request {}/{} differs from the recorded {}/{} call", request.agent, request.tag, c.agent, c.tag),
                }),
                other => Err(Error::ReplayDiverged { seq, reason: format!("provider call where the log has {}", other.kind()) }),
            };
        }
        if self.writer.is_none() {
            return Err(Error::EndOfLog);
        }
        let result = with_retry(self.provider, &request, &self.retry)?;
        self.append_live(provider_call_event(&request, &result))?;
        Ok(result)
    }

    fn emit(&mut self, event: Event) -> Result<()> {
        if self.cursor < self.log.len() {
            let rec = &self.log[self.cursor];
            let (kind, payload) = event.to_parts()?;
            if rec.kind != kind || rec.payload != payload {
                return Err(Error::ReplayDiverged {
                    seq: rec.seq,
                    reason: if rec.kind != kind {
                        format!("emitted {kind}, log has {}", rec.kind)
                    } else {
                        format!("{kind} payload differs from the recorded one")
                    },
                });
            }
            self.cursor += 1;
            return Ok(());
        }
        self.append_live(event)
    }

    fn history(&self) -> Vec<Event> {
        self.events[..self.cursor].to_vec()
    }
}

/// Directory under a run that holds cached sandbox executions.
pub fn sandbox_root(run_dir: &Path) -> PathBuf {
    run_dir.join("sandbox")
}
