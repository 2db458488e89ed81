//! Runs generated code in throwaway working directories.
//!
//! This is the only place the engine spawns processes. Children get a scrubbed
//! environment, their own process group (killed wholesale on timeout) and an
//! optional address-space cap.

mod harness;

use std::fs;
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use harness::{
    canonical_eq, execute_cases, parse_literal, run_testcases, CaseResult, CaseStatus, EntrySignature, HarnessCase,
    Observation, CASE_LOG,
};

use crate::error::{Error, Result};
use crate::level::CodeLevel;

pub const OUTPUT_TRUNCATION_MARKER: &str = "\n[output truncated]\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toolchain {
    /// Command template for SCRIPT programs; `{file}` is the program path.
    pub script_run_cmd: String,
    /// Compile template for SYNTH programs; `{file}` source, `{exe}` output.
    pub synth_compile_cmd: String,
    pub synth_run_cmd: String,
    pub script_ext: String,
    pub synth_ext: String,
    pub timeout_secs: u64,
    pub grace_ms: u64,
    pub memory_limit_mb: Option<u64>,
    pub output_cap_bytes: usize,
    pub max_parallel: usize,
}

impl Default for Toolchain {
    fn default() -> Self {
        Toolchain {
            script_run_cmd: "python3 {file}".into(),
            synth_compile_cmd: "g++ -std=c++17 -O0 -o {exe} {file}".into(),
            synth_run_cmd: "{exe}".into(),
            script_ext: "py".into(),
            synth_ext: "cpp".into(),
            timeout_secs: 10,
            grace_ms: 1_000,
            memory_limit_mb: None,
            output_cap_bytes: 64 * 1024,
            max_parallel: 4,
        }
    }
}

impl Toolchain {
    pub fn extension(&self, level: CodeLevel) -> &str {
        match level {
            CodeLevel::Pseudo => "txt",
            CodeLevel::Script => &self.script_ext,
            CodeLevel::Synth => &self.synth_ext,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionRequest {
    pub level: CodeLevel,
    pub program_text: String,
    pub harness_text: String,
    pub timeout_secs: u64,
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecStatus {
    Ok,
    CompileError,
    RuntimeError,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecStatus,
    pub stdout: String,
    pub stderr: String,
    pub exit_code: i32,
    pub duration_secs: f64,
    /// Contents of the harness's dedicated case-result file, if written.
    #[serde(default)]
    pub case_log: String,
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().expect("semaphore");
        while *n == 0 {
            n = self.cv.wait(n).expect("semaphore");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore") += 1;
        self.0.cv.notify_one();
    }
}

/// Process runner shared by all executions of a process.
#[derive(Clone)]
pub struct Sandbox {
    toolchain: Toolchain,
    gate: Arc<Semaphore>,
}

struct Captured {
    status: ExecStatus,
    stdout: String,
    stderr: String,
    exit_code: i32,
}

fn read_capped(mut r: impl Read, cap: usize) -> String {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 8192];
    let mut truncated = false;
    loop {
        match r.read(&mut chunk) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                let room = cap.saturating_sub(buf.len());
                if n > room {
                    truncated = true;
                }
                buf.extend_from_slice(&chunk[..n.min(room)]);
            }
        }
    }
    let mut s = String::from_utf8_lossy(&buf).into_owned();
    if truncated {
        s.push_str(OUTPUT_TRUNCATION_MARKER);
    }
    s
}

impl Sandbox {
    pub fn new(toolchain: Toolchain) -> Self {
        let permits = toolchain.max_parallel.max(1);
        Sandbox { toolchain, gate: Arc::new(Semaphore { permits: Mutex::new(permits), cv: Condvar::new() }) }
    }

    pub fn toolchain(&self) -> &Toolchain {
        &self.toolchain
    }

    fn command(&self, template: &str, file: &Path, exe: &Path) -> Result<Vec<String>> {
        let argv: Vec<String> = template
            .split_whitespace()
            .map(|tok| {
                tok.replace("{file}", &file.to_string_lossy()).replace("{exe}", &exe.to_string_lossy())
            })
            .collect();
        if argv.is_empty() {
            return Err(Error::ToolchainMissing(format!("empty command template `{template}`")));
        }
        Ok(argv)
    }

    fn spawn(&self, argv: &[String], workdir: &Path, deadline: Instant) -> Result<Captured> {
        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..])
            .current_dir(workdir)
            .env_clear()
            .env("PATH", std::env::var("PATH").unwrap_or_else(|_| "/usr/local/bin:/usr/bin:/bin".into()))
            .env("HOME", workdir)
            .env("LANG", "C.UTF-8")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        let mem_cap = self.toolchain.memory_limit_mb.map(|mb| mb * 1024 * 1024);
        // SAFETY: only async-signal-safe libc calls run between fork and exec.
        unsafe {
            cmd.pre_exec(move || {
                libc::setpgid(0, 0);
                if let Some(bytes) = mem_cap {
                    let lim = libc::rlimit { rlim_cur: bytes as libc::rlim_t, rlim_max: bytes as libc::rlim_t };
                    libc::setrlimit(libc::RLIMIT_AS, &lim);
                }
                Ok(())
            });
        }
        let mut child = cmd.spawn().map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => {
                Error::ToolchainMissing(format!("`{}`: {e}", argv[0]))
            }
            _ => Error::Sandbox(format!("spawning `{}`: {e}", argv[0])),
        })?;
        let cap = self.toolchain.output_cap_bytes;
        let out = child.stdout.take().expect("piped stdout");
        let err = child.stderr.take().expect("piped stderr");
        let out_t = thread::spawn(move || read_capped(out, cap));
        let err_t = thread::spawn(move || read_capped(err, cap));
        let pid = child.id() as i32;
        let mut timed_out = false;
        let status = loop {
            match child.try_wait() {
                Ok(Some(st)) => break st,
                Ok(None) => {
                    if Instant::now() >= deadline {
                        timed_out = true;
                        // SAFETY: plain kill(2) on the child's process group.
                        unsafe {
                            libc::kill(-pid, libc::SIGKILL);
                        }
                        let _ = child.kill();
                        break child.wait().map_err(|e| Error::Sandbox(e.to_string()))?;
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(Error::Sandbox(e.to_string())),
            }
        };
        let stdout = out_t.join().unwrap_or_default();
        let stderr = err_t.join().unwrap_or_default();
        use std::os::unix::process::ExitStatusExt;
        let exit_code = status.code().unwrap_or_else(|| -status.signal().unwrap_or(1));
        let status = if timed_out {
            ExecStatus::Timeout
        } else if exit_code == 0 {
            ExecStatus::Ok
        } else {
            ExecStatus::RuntimeError
        };
        Ok(Captured { status, stdout, stderr, exit_code })
    }

    /// Runs one program plus harness in `request.workdir`, which must be new or empty.
    pub fn execute(&self, request: &ExecutionRequest) -> Result<ExecutionResult> {
        if request.level == CodeLevel::Pseudo {
            return Err(Error::Precondition("PSEUDO code is never executed".into()));
        }
        if request.timeout_secs == 0 {
            return Err(Error::Precondition("timeout must be positive".into()));
        }
        let dir = &request.workdir;
        if dir.exists() && fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(true) {
            return Err(Error::Sandbox(format!("workdir {} is not fresh", dir.display())));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let dir = dir.canonicalize().map_err(|e| Error::io("resolving workdir", e))?;
        let file = dir.join(format!("main.{}", self.toolchain.extension(request.level)));
        let exe = dir.join("main.bin");
        let mut source = request.program_text.clone();
        if !source.ends_with('\n') {
            source.push('\n');
        }
        source.push_str(&request.harness_text);
        fs::write(&file, source).map_err(|e| Error::io("writing program", e))?;

        let _permit = self.gate.acquire();
        let started = Instant::now();
        let deadline = started + Duration::from_secs(request.timeout_secs);
        let elapsed = |s: Instant| s.elapsed().as_secs_f64();

        if request.level == CodeLevel::Synth {
            let argv = self.command(&self.toolchain.synth_compile_cmd, &file, &exe)?;
            let c = self.spawn(&argv, &dir, deadline)?;
            if c.status != ExecStatus::Ok {
                return Ok(ExecutionResult {
                    status: if c.status == ExecStatus::Timeout { ExecStatus::Timeout } else { ExecStatus::CompileError },
                    stdout: c.stdout,
                    stderr: c.stderr,
                    exit_code: c.exit_code,
                    duration_secs: elapsed(started),
                    case_log: String::new(),
                });
            }
        }
        let template = match request.level {
            CodeLevel::Script => &self.toolchain.script_run_cmd,
            _ => &self.toolchain.synth_run_cmd,
        };
        let argv = self.command(template, &file, &exe)?;
        let c = self.spawn(&argv, &dir, deadline)?;
        let case_log = fs::read_to_string(dir.join(CASE_LOG)).unwrap_or_default();
        Ok(ExecutionResult {
            status: c.status,
            stdout: c.stdout,
            stderr: c.stderr,
            exit_code: c.exit_code,
            duration_secs: elapsed(started),
            case_log,
        })
    }
}

impl Sandbox {
    /// Runs an arbitrary command template against `file_text` written to
    /// `workdir/<file_name>`; `{file}` expands to that path. Used for
    /// external tools such as a synthesizer.
    pub fn run_tool(&self, template: &str, file_name: &str, file_text: &str, workdir: &Path, timeout_secs: u64) -> Result<ExecutionResult> {
        if timeout_secs == 0 {
            return Err(Error::Precondition("timeout must be positive".into()));
        }
        fs::create_dir_all(workdir).map_err(|e| Error::io(format!("creating {}", workdir.display()), e))?;
        let dir = workdir.canonicalize().map_err(|e| Error::io("resolving workdir", e))?;
        let file = dir.join(file_name);
        fs::write(&file, file_text).map_err(|e| Error::io("writing tool input", e))?;
        let argv = self.command(template, &file, &dir.join("tool.out"))?;
        let _permit = self.gate.acquire();
        let started = Instant::now();
        let c = self.spawn(&argv, &dir, started + Duration::from_secs(timeout_secs))?;
        Ok(ExecutionResult {
            status: c.status,
            stdout: c.stdout,
            stderr: c.stderr,
            exit_code: c.exit_code,
            duration_secs: started.elapsed().as_secs_f64(),
            case_log: String::new(),
        })
    }
}

/// Something that can run a program plus harness and hand back the result.
/// The orchestrator's implementation allocates a numbered workdir per call.
pub trait Executor {
    fn run(&mut self, level: CodeLevel, program: &str, harness: &str) -> Result<ExecutionResult>;
}

/// Executor that numbers workdirs under a root directory.
pub struct LocalExecutor {
    pub sandbox: Sandbox,
    pub root: PathBuf,
    pub next_seq: u64,
}

impl LocalExecutor {
    pub fn new(sandbox: Sandbox, root: impl Into<PathBuf>) -> Self {
        LocalExecutor { sandbox, root: root.into(), next_seq: 1 }
    }

    pub fn workdir(&self, seq: u64) -> PathBuf {
        self.root.join(format!("{seq:05}"))
    }
}

impl Executor for LocalExecutor {
    fn run(&mut self, level: CodeLevel, program: &str, harness: &str) -> Result<ExecutionResult> {
        let workdir = self.workdir(self.next_seq);
        self.next_seq += 1;
        self.sandbox.execute(&ExecutionRequest {
            level,
            program_text: program.to_string(),
            harness_text: harness.to_string(),
            timeout_secs: self.sandbox.toolchain().timeout_secs,
            workdir,
        })
    }
}
