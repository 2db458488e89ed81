//! `hwforge` — drive, inspect and serve specification-to-C++ runs.

use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use hwforge_core::hls::{lint_for_hls, Ruleset, Severity};
use hwforge_core::orchestrator::config::RunMode;
use hwforge_core::orchestrator::{self, RunConfig, RunState, RunStore, StepStatus};
use hwforge_core::patcher::IntegratedSource;
use hwforge_core::{CodeLevel, Error};

mod server;

/// Exit statuses shared by every subcommand.
const EXIT_OK: u8 = 0;
const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_BLOCKED: u8 = 3;

#[derive(Parser)]
#[command(name = "hwforge", version, about = "Turn a hardware specification bundle into HLS-ready C++")]
struct Cli {
    /// Directory holding one sub-directory per run.
    #[arg(long, global = true, env = "HWFORGE_RUNS", default_value = "runs")]
    runs_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a run and drive it until it completes or needs an answer.
    Run {
        config: PathBuf,
        /// Overrides the bundle directory named in the config.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Prompt for intervention answers on the terminal instead of stopping.
        #[arg(long)]
        interactive: bool,
    },
    /// Continue an existing run until it completes or needs an answer.
    Resume {
        run_id: String,
        #[arg(long)]
        interactive: bool,
    },
    /// Advance a run by one phase.
    Step { run_id: String },
    /// Answer a pending intervention request.
    Answer {
        run_id: String,
        request_id: String,
        /// Answer text; `-` reads it from stdin.
        text: String,
    },
    /// Print a run's summary as JSON.
    Status { run_id: String },
    /// One row per run: correct, interventions, mean coding attempts.
    Metrics {
        /// Run ids or glob patterns over run ids; all runs when omitted.
        runs: Vec<String>,
        #[arg(long)]
        json: bool,
    },
    /// Check a C++ file against the HLS ruleset.
    Lint {
        file: PathBuf,
        #[arg(long)]
        ruleset: Option<PathBuf>,
    },
    /// Re-execute a run against its log and check it reproduces.
    Replay { run_id: String },
    /// Baseline: ask the coder for the whole target in one reply.
    SingleShot {
        config: PathBuf,
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Drive runs in-process; without it the API only observes and answers.
        #[arg(long)]
        drive: bool,
        /// Shared bearer token required on every request.
        #[arg(long, env = "HWFORGE_TOKEN")]
        token: Option<String>,
    },
}

/// Bad invocation rather than a failed run.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("HWFORGE_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            match e.downcast_ref::<Error>() {
                Some(core) => eprintln!("error: {}: {e:#}", core.code()),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::from(exit_for_error(&e))
        }
    }
}

fn exit_for_error(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::ConfigInvalid(_)) => EXIT_USAGE,
        Some(Error::BlockedOnIntervention(_)) => EXIT_BLOCKED,
        _ => EXIT_FAILURE,
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<u8> {
    let store = RunStore::new(&cli.runs_dir);
    match cli.command {
        Command::Run { config, bundle, interactive } => {
            let cfg = load_config(&config, bundle.as_deref(), None)?;
            let id = orchestrator::start_run(&store, &cfg)?;
            println!("run {id} started");
            drive_loop(&store, &id, interactive)
        }
        Command::SingleShot { config, bundle } => {
            let cfg = load_config(&config, bundle.as_deref(), Some(RunMode::SingleShot))?;
            let id = orchestrator::start_run(&store, &cfg)?;
            println!("run {id} started (single-shot)");
            drive_loop(&store, &id, false)
        }
        Command::Resume { run_id, interactive } => {
            let state = orchestrator::resume(&store, &run_id)?;
            if state.is_terminal() {
                print_terminal(&run_id, &state);
                return Ok(terminal_exit(&state));
            }
            drive_loop(&store, &run_id, interactive)
        }
        Command::Step { run_id } => {
            let out = orchestrator::step(&store, &run_id)?;
            println!("{}", serde_json::to_string(&out.status)?);
            Ok(match out.status {
                StepStatus::Advanced => EXIT_OK,
                StepStatus::Blocked { request_id } => {
                    print_questions(&run_id, &out.state, &request_id);
                    EXIT_BLOCKED
                }
                StepStatus::Completed { .. } | StepStatus::Failed { .. } => {
                    print_terminal(&run_id, &out.state);
                    terminal_exit(&out.state)
                }
            })
        }
        Command::Answer { run_id, request_id, text } => {
            let text = if text == "-" { read_stdin_answer()? } else { text };
            let req = orchestrator::answer(&store, &run_id, &request_id, &text)?;
            println!("{} answered; continue with `hwforge resume {run_id}`", req.request_id);
            Ok(EXIT_OK)
        }
        Command::Status { run_id } => {
            let summary = orchestrator::summarize(&store, &run_id)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(EXIT_OK)
        }
        Command::Metrics { runs, json } => metrics(&store, &runs, json),
        Command::Lint { file, ruleset } => lint(&file, ruleset.as_deref()),
        Command::Replay { run_id } => {
            let report = orchestrator::replay(&store, &run_id)?;
            println!("replayed {} events ({} sandbox executions): OK", report.events, report.sandbox_executions);
            Ok(EXIT_OK)
        }
        Command::Serve { addr, drive, token } => {
            let rt = tokio::runtime::Runtime::new().context("starting async runtime")?;
            rt.block_on(server::serve(&addr, store, drive, token))?;
            Ok(EXIT_OK)
        }
    }
}

fn load_config(path: &Path, bundle: Option<&Path>, mode: Option<RunMode>) -> anyhow::Result<RunConfig> {
    if !path.is_file() {
        return Err(Usage(format!("config file {} does not exist", path.display())).into());
    }
    let mut cfg = RunConfig::load(path)?;
    if let Some(b) = bundle {
        if !b.is_dir() {
            return Err(Usage(format!("bundle directory {} does not exist", b.display())).into());
        }
        cfg.bundle = b.to_path_buf();
    }
    if let Some(m) = mode {
        cfg.mode = m;
    }
    Ok(cfg)
}

fn drive_loop(store: &RunStore, id: &str, interactive: bool) -> anyhow::Result<u8> {
    loop {
        let out = orchestrator::drive(store, id)?;
        match out.status {
            StepStatus::Advanced => continue,
            StepStatus::Blocked { request_id } => {
                print_questions(id, &out.state, &request_id);
                if !interactive {
                    println!("answer with: hwforge answer {id} {request_id} \"<text>\"");
                    return Ok(EXIT_BLOCKED);
                }
                print!("answer (finish with an empty line): ");
                std::io::stdout().flush()?;
                let text = read_stdin_answer()?;
                if text.trim().is_empty() {
                    println!("no answer given; run left blocked");
                    return Ok(EXIT_BLOCKED);
                }
                orchestrator::answer(store, id, &request_id, &text)?;
            }
            StepStatus::Completed { .. } | StepStatus::Failed { .. } => {
                print_terminal(id, &out.state);
                return Ok(terminal_exit(&out.state));
            }
        }
    }
}

/// Reads lines until an empty line or end of input.
fn read_stdin_answer() -> anyhow::Result<String> {
    let mut lines = Vec::new();
    for line in std::io::stdin().lock().lines() {
        let line = line.context("reading answer")?;
        if line.trim().is_empty() {
            break;
        }
        lines.push(line);
    }
    Ok(lines.join("\n"))
}

fn print_questions(id: &str, state: &RunState, rid: &str) {
    println!("run {id} blocked on intervention {rid}");
    if let Some(req) = state.intervention(rid) {
        if let Some(sf) = &req.subfunction {
            println!("  sub-function: {sf}");
        }
        println!("  observations: {}", req.observations);
        println!("  attempts: {}", req.attempts);
        for q in &req.questions {
            println!("  question: {q}");
        }
    }
}

fn print_terminal(id: &str, state: &RunState) {
    if let Some(f) = &state.failure {
        println!("run {id} failed: {} {}", f.code, f.message);
    } else if let Some(o) = &state.outcome {
        let correct = o.correct.map_or("unknown".to_string(), |c| c.to_string());
        println!("run {id} completed: correct={correct} ({}/{} cases passed)", o.passed, o.total);
        for f in &o.failures {
            println!("  FAIL {} observed {}", f.id, f.observed);
        }
    }
}

fn terminal_exit(state: &RunState) -> u8 {
    if state.correct() == Some(true) {
        EXIT_OK
    } else {
        EXIT_FAILURE
    }
}

fn metrics(store: &RunStore, patterns: &[String], json: bool) -> anyhow::Result<u8> {
    let globs = patterns
        .iter()
        .map(|p| glob::Pattern::new(p).map_err(|e| Usage(format!("bad run pattern `{p}`: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let ids: Vec<String> =
        store.list()?.into_iter().filter(|id| globs.is_empty() || globs.iter().any(|g| g.matches(id))).collect();
    if ids.is_empty() && !patterns.is_empty() {
        bail!("no runs match {}", patterns.join(", "));
    }
    let mut rows = Vec::new();
    for id in &ids {
        rows.push((id.clone(), orchestrator::summarize(store, id)?.metrics));
    }
    if json {
        let out: Vec<_> = rows
            .iter()
            .map(|(id, m)| serde_json::json!({"run_id": id, "correct": m.correct, "n_interventions": m.n_interventions, "avg_coding": m.avg_coding}))
            .collect();
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        println!("{:<28} {:>8} {:>15} {:>10}", "run_id", "correct", "n_interventions", "avg_coding");
        for (id, m) in &rows {
            let correct = m.correct.map_or("-".to_string(), |c| c.to_string());
            println!("{id:<28} {correct:>8} {:>15} {:>10.2}", m.n_interventions, m.avg_coding);
        }
    }
    Ok(EXIT_OK)
}

fn lint(file: &Path, ruleset: Option<&Path>) -> anyhow::Result<u8> {
    if !file.is_file() {
        return Err(Usage(format!("{} does not exist", file.display())).into());
    }
    let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let rules = match ruleset {
        Some(p) => Ruleset::load(p)?,
        None => Ruleset::default_rules(),
    };
    let source = IntegratedSource::new(CodeLevel::Synth, text)?;
    let report = lint_for_hls(&source, &rules)?;
    for v in &report.violations {
        let sev = match v.severity {
            Severity::Blocking => "BLOCKING",
            Severity::Warning => "WARNING",
        };
        println!("{}:{}: {sev} {} {}", file.display(), v.line, v.rule_id, v.excerpt.trim());
    }
    let blocking = report.blocking().count();
    println!("{} violation(s), {blocking} blocking", report.violations.len());
    Ok(if blocking == 0 { EXIT_OK } else { EXIT_FAILURE })
}
