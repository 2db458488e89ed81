//! HTTP API over a runs directory. Every read is a projection of the event
//! logs; the only writes are starting, stepping and answering.

use std::collections::HashSet;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hwforge_core::orchestrator::{self, RunConfig, RunStore, StepStatus};
use hwforge_core::{CodeLevel, Error};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::mpsc;
use tokio_stream::wrappers::ReceiverStream;

pub const API_VERSION: u32 = 1;
const POLL: Duration = Duration::from_millis(150);

#[derive(Clone)]
struct App {
    store: RunStore,
    drive: bool,
    token: Option<String>,
    /// Runs with a background driver in flight.
    driving: Arc<Mutex<HashSet<String>>>,
}

pub async fn serve(addr: &str, store: RunStore, drive: bool, token: Option<String>) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    // Tests and scripts read the bound address from this line.
    println!("listening on http://{}", listener.local_addr()?);
    tracing::info!(drive, auth = token.is_some(), "serving");
    let app = App { store, drive, token, driving: Arc::default() };
    axum::serve(listener, router(app)).await?;
    Ok(())
}

fn router(app: App) -> Router {
    Router::new()
        .route("/runs", get(list_runs).post(start_run))
        .route("/runs/:id", get(get_run))
        .route("/runs/:id/events", get(events))
        .route("/runs/:id/plan", get(get_plan))
        .route("/runs/:id/specs/:name", get(get_spec))
        .route("/runs/:id/source/:level", get(get_source))
        .route("/runs/:id/interventions", get(get_interventions))
        .route("/runs/:id/interventions/:rid/answer", post(post_answer))
        .route("/runs/:id/step", post(post_step))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "NOT_FOUND", "no such endpoint".into()) })
        .layer(middleware::from_fn_with_state(app.clone(), auth))
        .with_state(app)
}

struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: String) -> Self {
        ApiError { status, code: code.to_string(), message }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownRun(_) | Error::UnknownRequest(_) | Error::UnknownSectionId(_) => StatusCode::NOT_FOUND,
            Error::AlreadyAnswered(_)
            | Error::BlockedOnIntervention(_)
            | Error::RunTerminal(_)
            | Error::ConcurrentWrite(_) => StatusCode::CONFLICT,
            Error::ConfigInvalid(_) | Error::Precondition(_) | Error::ManifestMalformed(_) | Error::AttachmentMissing(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError { status, code: e.code().to_string(), message: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"api_version": API_VERSION, "error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

/// Wraps `fields` (an object) with the API version.
fn reply(status: StatusCode, mut fields: Value) -> ApiResult {
    if let Value::Object(m) = &mut fields {
        m.insert("api_version".into(), json!(API_VERSION));
    }
    Ok((status, Json(fields)).into_response())
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<Value, ApiError> {
    serde_json::to_value(v).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "SERIALIZE", e.to_string()))
}

/// Runs blocking engine work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, Error> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "TASK_FAILED", e.to_string()))?
        .map_err(ApiError::from)
}

async fn auth(State(app): State<App>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(token) = &app.token {
        let given = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "UNAUTHORIZED", "missing or wrong bearer token".into()).into_response();
        }
    }
    next.run(req).await
}

async fn list_runs(State(app): State<App>) -> ApiResult {
    let store = app.store.clone();
    let runs = blocking(move || {
        // A run directory without a readable log yet is skipped, not fatal.
        let ids = store.list()?;
        Ok(ids.iter().filter_map(|id| orchestrator::summarize(&store, id).ok()).collect::<Vec<_>>())
    })
    .await?;
    reply(StatusCode::OK, json!({ "runs": to_value(&runs)? }))
}

async fn get_run(State(app): State<App>, Path(id): Path<String>) -> ApiResult {
    let store = app.store.clone();
    let summary = blocking(move || orchestrator::summarize(&store, &id)).await?;
    reply(StatusCode::OK, to_value(&summary)?)
}

async fn state_of(app: &App, id: String) -> Result<orchestrator::RunState, ApiError> {
    let store = app.store.clone();
    blocking(move || orchestrator::read_state(&store, &id).map(|(s, _)| s)).await
}

fn not_found(what: String) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NOT_FOUND", what)
}

async fn get_plan(State(app): State<App>, Path(id): Path<String>) -> ApiResult {
    let state = state_of(&app, id.clone()).await?;
    let plan = state.plan.ok_or_else(|| not_found(format!("run {id} has no plan yet")))?;
    reply(StatusCode::OK, json!({ "run_id": id, "plan": to_value(&plan)? }))
}

async fn get_spec(State(app): State<App>, Path((id, name)): Path<(String, String)>) -> ApiResult {
    let state = state_of(&app, id.clone()).await?;
    let spec = state.specs.get(&name).ok_or_else(|| not_found(format!("run {id} has no accepted spec `{name}`")))?;
    reply(StatusCode::OK, json!({ "run_id": id, "spec": to_value(spec)? }))
}

async fn get_source(State(app): State<App>, Path((id, level)): Path<(String, String)>) -> ApiResult {
    let level: CodeLevel = level.parse().map_err(|e: String| ApiError::new(StatusCode::BAD_REQUEST, "BAD_LEVEL", e))?;
    let state = state_of(&app, id.clone()).await?;
    let src = state.sources.get(&level).ok_or_else(|| not_found(format!("run {id} has no {level} source yet")))?;
    reply(StatusCode::OK, json!({ "run_id": id, "level": level, "text": src.text, "content_hash": src.content_hash() }))
}

async fn get_interventions(State(app): State<App>, Path(id): Path<String>) -> ApiResult {
    let state = state_of(&app, id.clone()).await?;
    reply(StatusCode::OK, json!({ "run_id": id, "pending": state.pending, "interventions": to_value(&state.interventions)? }))
}

#[derive(Deserialize)]
struct AnswerBody {
    answer: String,
}

async fn post_answer(State(app): State<App>, Path((id, rid)): Path<(String, String)>, Json(body): Json<AnswerBody>) -> ApiResult {
    let store = app.store.clone();
    let (run, req) = (id.clone(), rid.clone());
    let answered = blocking(move || orchestrator::answer(&store, &run, &req, &body.answer)).await?;
    if app.drive {
        spawn_driver(&app, id.clone());
    }
    reply(StatusCode::OK, json!({ "run_id": id, "request": to_value(&answered)? }))
}

#[derive(Deserialize)]
struct StartBody {
    /// Path of a TOML run config on the server.
    config_path: PathBuf,
    /// Optional bundle directory overriding the config's.
    #[serde(default)]
    bundle: Option<PathBuf>,
}

fn driver_disabled() -> ApiError {
    ApiError::new(StatusCode::FORBIDDEN, "DRIVER_DISABLED", "this server observes runs only; restart with --drive".into())
}

async fn start_run(State(app): State<App>, Json(body): Json<StartBody>) -> ApiResult {
    if !app.drive {
        return Err(driver_disabled());
    }
    let store = app.store.clone();
    let id = blocking(move || {
        let mut cfg = RunConfig::load(&body.config_path)?;
        if let Some(b) = body.bundle {
            cfg.bundle = b;
        }
        orchestrator::start_run(&store, &cfg)
    })
    .await?;
    spawn_driver(&app, id.clone());
    reply(StatusCode::CREATED, json!({ "run_id": id }))
}

async fn post_step(State(app): State<App>, Path(id): Path<String>) -> ApiResult {
    if !app.drive {
        return Err(driver_disabled());
    }
    let store = app.store.clone();
    let run = id.clone();
    let out = blocking(move || orchestrator::step(&store, &run)).await?;
    let appended: Vec<u64> = out.events.iter().map(|e| e.seq).collect();
    reply(StatusCode::OK, json!({ "run_id": id, "step": to_value(&out.status)?, "appended": appended }))
}

/// Drives `id` in the background until it blocks or ends; one driver per run.
fn spawn_driver(app: &App, id: String) {
    if !app.driving.lock().expect("driver set").insert(id.clone()) {
        return;
    }
    let (store, driving) = (app.store.clone(), app.driving.clone());
    tokio::task::spawn_blocking(move || {
        loop {
            match orchestrator::drive(&store, &id) {
                Ok(out) if out.status == StepStatus::Advanced => continue,
                Ok(out) => tracing::info!(run = %id, status = ?out.status, "driver stopped"),
                Err(e) => tracing::warn!(run = %id, error = %e, "driver stopped"),
            }
            break;
        }
        driving.lock().expect("driver set").remove(&id);
    });
}

#[derive(Deserialize)]
struct EventsQuery {
    from: Option<u64>,
}

/// Server-sent events from `from` (or after Last-Event-ID) onward, then a
/// live tail. A run that has reached a terminal event ends the stream with
/// an `end` event once everything has been delivered.
async fn events(State(app): State<App>, Path(id): Path<String>, Query(q): Query<EventsQuery>, headers: HeaderMap) -> ApiResult {
    app.store.run_dir(&id).map_err(ApiError::from)?;
    let resume_after = headers.get("last-event-id").and_then(|v| v.to_str().ok()).and_then(|v| v.parse::<u64>().ok());
    let mut next = match (resume_after, q.from) {
        (Some(last), _) => last + 1,
        (None, Some(from)) => from.max(1),
        (None, None) => 1,
    };
    let (tx, rx) = mpsc::channel::<Result<SseEvent, Infallible>>(64);
    let store = app.store.clone();
    tokio::spawn(async move {
        loop {
            let (store2, id2) = (store.clone(), id.clone());
            let log = match tokio::task::spawn_blocking(move || orchestrator::read_state(&store2, &id2)).await {
                Ok(Ok((_, log))) => log,
                Ok(Err(e)) => {
                    let _ = tx.send(Ok(SseEvent::default().event("error").data(e.to_string()))).await;
                    return;
                }
                Err(_) => return,
            };
            let fresh: Vec<_> = log.iter().filter(|e| e.seq >= next).collect();
            for ev in fresh {
                let mut data = serde_json::to_value(ev).unwrap_or(Value::Null);
                if let Value::Object(m) = &mut data {
                    m.insert("api_version".into(), json!(API_VERSION));
                }
                let sse = SseEvent::default().id(ev.seq.to_string()).event("run_event").data(data.to_string());
                if tx.send(Ok(sse)).await.is_err() {
                    return;
                }
                next = ev.seq + 1;
            }
            let terminal = log.last().is_some_and(|e| e.kind == "RUN_COMPLETED" || e.kind == "RUN_FAILED");
            if terminal {
                let _ = tx.send(Ok(SseEvent::default().event("end").data(json!({"api_version": API_VERSION, "last_seq": next - 1}).to_string()))).await;
                return;
            }
            tokio::select! {
                _ = tokio::time::sleep(POLL) => {}
                _ = tx.closed() => return,
            }
        }
    });
    Ok(Sse::new(ReceiverStream::new(rx)).keep_alive(KeepAlive::default()).into_response())
}
