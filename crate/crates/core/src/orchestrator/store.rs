//! On-disk run directories. `events.log` is the only source of truth; the
//! other files are conveniences derived from it.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use super::config::{ProviderConfig, RunConfig};
use super::events::{parse_log, Event, InterventionAnswered, RunEvent};
use super::state::RunState;
use crate::error::{Error, Result};
use crate::reflection::InterventionRequest;

pub const EVENTS_FILE: &str = "events.log";
pub const CONFIG_FILE: &str = "config.json";
pub const BUNDLE_DIR: &str = "bundle";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";
pub const RULESET_FILE: &str = "ruleset.jsonl";
pub const METRICS_FILE: &str = "metrics.json";

fn io(ctx: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
    let ctx = ctx.into();
    move |e| Error::io(ctx, e)
}

pub fn now_timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(format!("creating {}", dir.display())))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_string_pretty(value)? + "\n").map_err(io(format!("writing {}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(io(format!("renaming into {}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(format!("creating {}", dir.display())))?;
    }
    fs::write(path, text).map_err(io(format!("writing {}", path.display())))
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).map_err(io(format!("creating {}", to.display())))?;
    for entry in fs::read_dir(from).map_err(io(format!("reading {}", from.display())))? {
        let entry = entry.map_err(io("listing bundle"))?;
        let dest = to.join(entry.file_name());
        if entry.file_type().map_err(io("stat"))?.is_dir() {
            copy_dir(&entry.path(), &dest)?;
        } else {
            fs::copy(entry.path(), &dest).map_err(io(format!("copying {}", entry.path().display())))?;
        }
    }
    Ok(())
}

fn valid_run_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> Result<PathBuf> {
        let dir = self.root.join(run_id);
        if !valid_run_id(run_id) || !dir.join(EVENTS_FILE).is_file() {
            return Err(Error::UnknownRun(run_id.to_string()));
        }
        Ok(dir)
    }

    /// Run ids sort chronologically.
    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        let Ok(rd) = fs::read_dir(&self.root) else {
            return Ok(ids);
        };
        for entry in rd.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if valid_run_id(&name) && entry.path().join(EVENTS_FILE).is_file() {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Allocates a self-contained run directory: inputs are copied in and
    /// the stored config points at the copies.
    pub fn create(&self, config: &RunConfig) -> Result<(String, PathBuf)> {
        fs::create_dir_all(&self.root).map_err(io(format!("creating {}", self.root.display())))?;
        let (id, dir) = loop {
            let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
            let id = format!("r{stamp}-{:06x}", rand::thread_rng().gen_range(0..0x100_0000u32));
            let dir = self.root.join(&id);
            match fs::create_dir(&dir) {
                Ok(()) => break (id, dir),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(Error::io(format!("creating {}", dir.display()), e)),
            }
        };
        let mut stored = config.clone();
        copy_dir(&config.bundle, &dir.join(BUNDLE_DIR))?;
        stored.bundle = PathBuf::from(BUNDLE_DIR);
        if let ProviderConfig::Scripted { transcript } = &mut stored.provider {
            fs::copy(&*transcript, dir.join(TRANSCRIPT_FILE)).map_err(io(format!("copying {}", transcript.display())))?;
            *transcript = PathBuf::from(TRANSCRIPT_FILE);
        }
        if let Some(r) = &mut stored.hls.ruleset {
            fs::copy(&*r, dir.join(RULESET_FILE)).map_err(io(format!("copying {}", r.display())))?;
            *r = PathBuf::from(RULESET_FILE);
        }
        write_json(&dir.join(CONFIG_FILE), &stored)?;
        File::create(dir.join(EVENTS_FILE)).map_err(io("creating events.log"))?;
        Ok((id, dir))
    }
}

pub fn load_config(dir: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(dir.join(CONFIG_FILE)).map_err(io("reading config.json"))?;
    let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
    cfg.resolve_paths(dir);
    cfg.validate()?;
    Ok(cfg)
}

/// Strict read: any malformed line is LOG_CORRUPT.
pub fn read_log(dir: &Path) -> Result<Vec<RunEvent>> {
    let text = fs::read_to_string(dir.join(EVENTS_FILE)).map_err(io("reading events.log"))?;
    parse_log(&text)
}

/// Reader view: an incomplete trailing line (a write in progress) is ignored.
pub fn read_log_prefix(dir: &Path) -> Result<Vec<RunEvent>> {
    let text = fs::read_to_string(dir.join(EVENTS_FILE)).map_err(io("reading events.log"))?;
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    parse_log(complete)
}

/// Exclusive append handle on a run's log, held for the duration of a step.
pub struct LogWriter {
    file: File,
    last_seq: u64,
}

impl LogWriter {
    /// Fails with CONCURRENT_WRITE when another writer holds the log.
    pub fn open(dir: &Path, run_id: &str) -> Result<(Self, Vec<RunEvent>)> {
        let file = OpenOptions::new().read(true).append(true).open(dir.join(EVENTS_FILE)).map_err(io("opening events.log"))?;
        match file.try_lock() {
            Ok(()) => {}
            Err(std::fs::TryLockError::WouldBlock) => return Err(Error::ConcurrentWrite(run_id.to_string())),
            Err(std::fs::TryLockError::Error(e)) => return Err(Error::io("locking events.log", e)),
        }
        Self::finish_open(file)
    }

    /// Waits for the lock instead of failing.
    pub fn open_blocking(dir: &Path) -> Result<(Self, Vec<RunEvent>)> {
        let file = OpenOptions::new().read(true).append(true).open(dir.join(EVENTS_FILE)).map_err(io("opening events.log"))?;
        file.lock().map_err(io("locking events.log"))?;
        Self::finish_open(file)
    }

    fn finish_open(mut file: File) -> Result<(Self, Vec<RunEvent>)> {
        let mut text = String::new();
        file.seek(SeekFrom::Start(0)).map_err(io("seeking events.log"))?;
        file.read_to_string(&mut text).map_err(io("reading events.log"))?;
        if !text.is_empty() && !text.ends_with('\n') {
            // A writer died mid-append; the torn line was never acknowledged.
            let keep = text.rfind('\n').map_or(0, |i| i + 1);
            tracing::warn!(dropped = text.len() - keep, "truncating torn trailing line in events.log");
            file.set_len(keep as u64).map_err(io("truncating events.log"))?;
            text.truncate(keep);
        }
        let log = parse_log(&text)?;
        let last_seq = log.last().map(|e| e.seq).unwrap_or(0);
        Ok((LogWriter { file, last_seq }, log))
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn append(&mut self, event: &Event) -> Result<RunEvent> {
        let rec = RunEvent::new(self.last_seq + 1, now_timestamp(), event)?;
        let line = rec.to_line()? + "\n";
        self.file.write_all(line.as_bytes()).map_err(io("appending to events.log"))?;
        self.file.flush().map_err(io("flushing events.log"))?;
        self.last_seq = rec.seq;
        Ok(rec)
    }
}

impl Drop for LogWriter {
    fn drop(&mut self) {
        let _ = self.file.unlock();
    }
}

pub fn intervention_path(dir: &Path, rid: &str) -> PathBuf {
    dir.join("interventions").join(format!("{rid}.json"))
}

/// Records an operator answer. Exactly one of several concurrent callers
/// succeeds; the rest see ALREADY_ANSWERED.
pub fn answer_intervention(dir: &Path, rid: &str, answer: &str) -> Result<(RunEvent, InterventionRequest)> {
    let (mut writer, log) = LogWriter::open_blocking(dir)?;
    let state = RunState::fold(&log)?;
    let req = state.intervention(rid).ok_or_else(|| Error::UnknownRequest(rid.to_string()))?;
    if state.pending.as_deref() != Some(rid) {
        return Err(Error::AlreadyAnswered(rid.to_string()));
    }
    if answer.trim().is_empty() {
        return Err(Error::Precondition("answer text is empty".into()));
    }
    let mut req = req.clone();
    let rec = writer.append(&Event::InterventionAnswered(InterventionAnswered { request_id: rid.to_string(), answer: answer.to_string() }))?;
    req.status = crate::reflection::RequestStatus::Answered;
    req.answer = Some(answer.to_string());
    write_json(&intervention_path(dir, rid), &req)?;
    Ok((rec, req))
}
