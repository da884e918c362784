//! HTTP API over the run loop.
//!
//! ```text
//! POST /v1/runs                 start a run            → 202 {"run_id"}
//! GET  /v1/runs[?status=...]    run summaries
//! GET  /v1/runs/{id}            summary + full record once finished
//! GET  /v1/runs/{id}/events     text/event-stream, replay then live tail
//! POST /v1/runs/{id}/cancel     request cancellation   → 202
//! GET  /v1/backends             backends and form limits
//! ```
//!
//! Errors are `{"error": {"code", "message", "field"?}}`. Each SSE frame has
//! `id: <sequence>`, `event: <kind>` and the [`RunEvent`] as JSON data; a
//! `Last-Event-ID` header resumes after that sequence. The stream ends after
//! `run_finished`.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::fs;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::watch;

use scriptloop::persist::{self, new_run_id, scan_runs};
use scriptloop::rag::{load_snapshot, RagIndex};
use scriptloop::runner::{RunEventKind, RunObserver};
use scriptloop::{CancelToken, ChatBackend, Config, RunRecord, RunStatus, Runner, ValidatorSpec};

pub const EVENTS_FILE: &str = "events.json";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRequest {
    pub prompt: String,
    /// Defaults to the configured default backend.
    #[serde(default)]
    pub backend_name: Option<String>,
    #[serde(default)]
    pub max_attempts: Option<u32>,
    #[serde(default)]
    pub persist: Option<bool>,
    #[serde(default)]
    pub rag_enabled: bool,
    /// Defaults to exit-code validation.
    #[serde(default)]
    pub validator: Option<ValidatorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub run_id: String,
    /// 1-based, gapless per run.
    pub sequence: u64,
    pub kind: RunEventKind,
    pub payload: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub backend: String,
    pub prompt: String,
    pub state: RunState,
    pub status: Option<RunStatus>,
    pub cancelled: bool,
    pub attempts: usize,
    pub attempts_to_pass: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDetail {
    pub summary: RunSummary,
    pub record: Option<RunRecord>,
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("backend `{name}`: {reason}")]
    Backend { name: String, reason: String },
    #[error("auth token variable `{0}` is configured but not set")]
    MissingToken(String),
    #[error("rag snapshot: {0}")]
    Rag(String),
}

// ── errors on the wire ────────────────────────────────────────────────

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    field: Option<&'static str>,
}

impl ApiError {
    fn bad_request(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "invalid_request",
            message: message.into(),
            field: Some(field),
        }
    }

    fn not_found(run_id: &str) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            code: "not_found",
            message: format!("no run `{run_id}`"),
            field: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"code": self.code, "message": self.message});
        if let Some(f) = self.field {
            body["field"] = json!(f);
        }
        (self.status, Json(json!({ "error": body }))).into_response()
    }
}

// ── run bookkeeping ───────────────────────────────────────────────────

struct RunEntry {
    run_id: String,
    backend: String,
    prompt: String,
    events: Mutex<Vec<RunEvent>>,
    tick: watch::Sender<usize>,
    record: Mutex<Option<RunRecord>>,
    cancel: CancelToken,
}

impl RunEntry {
    fn new(run_id: String, backend: String, prompt: String) -> Self {
        Self {
            run_id,
            backend,
            prompt,
            events: Mutex::new(Vec::new()),
            tick: watch::Sender::new(0),
            record: Mutex::new(None),
            cancel: CancelToken::new(),
        }
    }

    fn push(&self, kind: RunEventKind, payload: Value) {
        let len = {
            let mut events = self.events.lock().unwrap();
            let sequence = events.len() as u64 + 1;
            events.push(RunEvent {
                run_id: self.run_id.clone(),
                sequence,
                kind,
                payload,
            });
            events.len()
        };
        self.tick.send_replace(len);
    }

    fn summary(&self) -> RunSummary {
        let record = self.record.lock().unwrap();
        match record.as_ref() {
            Some(r) => RunSummary {
                run_id: self.run_id.clone(),
                backend: self.backend.clone(),
                prompt: self.prompt.clone(),
                state: RunState::Finished,
                status: Some(r.status),
                cancelled: r.cancelled,
                attempts: r.attempts.len(),
                attempts_to_pass: r.attempts_to_pass(),
            },
            None => RunSummary {
                run_id: self.run_id.clone(),
                backend: self.backend.clone(),
                prompt: self.prompt.clone(),
                state: RunState::Running,
                status: None,
                cancelled: self.cancel.is_cancelled(),
                attempts: self
                    .events
                    .lock()
                    .unwrap()
                    .iter()
                    .filter(|e| e.kind == RunEventKind::AttemptStarted)
                    .count(),
                attempts_to_pass: None,
            },
        }
    }
}

/// Forwards runner events into the run's log. `run_finished` is held back
/// and published by the service once the record is stored.
struct Relay(Arc<RunEntry>);

impl RunObserver for Relay {
    fn on_event(&self, kind: RunEventKind, payload: Value) {
        if kind != RunEventKind::RunFinished {
            self.0.push(kind, payload);
        }
    }
}

pub struct ServiceState {
    config: Config,
    backends: BTreeMap<String, Arc<dyn ChatBackend>>,
    runs: Mutex<BTreeMap<String, Arc<RunEntry>>>,
    active: AtomicUsize,
    auth_token: Option<String>,
    rag: Option<Arc<RagIndex>>,
}

impl ServiceState {
    /// Connect every configured backend and reload persisted history.
    pub fn from_config(config: Config) -> Result<Self, ServiceError> {
        let backends = config
            .backends
            .iter()
            .map(|p| {
                scriptloop::connect(p, &config.contracts.language).map_err(|e| ServiceError::Backend {
                    name: p.name.clone(),
                    reason: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(config, backends)
    }

    /// Build from already connected backends (looked up by name).
    pub fn new(config: Config, backends: Vec<Arc<dyn ChatBackend>>) -> Result<Self, ServiceError> {
        let auth_token = match &config.service.auth_token_env {
            None => None,
            Some(var) => Some(std::env::var(var).map_err(|_| ServiceError::MissingToken(var.clone()))?),
        };
        let rag = match (&config.rag.snapshot_path, config.rag.enabled) {
            (Some(path), true) => Some(Arc::new(
                load_snapshot(path).map_err(|e| ServiceError::Rag(e.to_string()))?,
            )),
            _ => None,
        };
        let state = Self {
            backends: backends.into_iter().map(|b| (b.name().to_string(), b)).collect(),
            runs: Mutex::new(BTreeMap::new()),
            active: AtomicUsize::new(0),
            auth_token,
            rag,
            config,
        };
        state.reload_history();
        Ok(state)
    }

    fn prefix(&self) -> Option<&PathBuf> {
        self.config.policy.prefix_dir.as_ref()
    }

    fn reload_history(&self) {
        let Some(prefix) = self.prefix() else { return };
        let mut runs = self.runs.lock().unwrap();
        for record in scan_runs(prefix) {
            let entry = RunEntry::new(record.run_id.clone(), record.backend.clone(), record.prompt.clone());
            let events_path = persist::run_dir(prefix, &record.run_id).join(EVENTS_FILE);
            let events: Vec<RunEvent> = fs::read_to_string(&events_path)
                .ok()
                .and_then(|t| serde_json::from_str(&t).ok())
                .unwrap_or_default();
            let n = events.len();
            *entry.events.lock().unwrap() = events;
            entry.tick.send_replace(n);
            if !entry
                .events
                .lock()
                .unwrap()
                .last()
                .is_some_and(|e| e.kind == RunEventKind::RunFinished)
            {
                entry.push(RunEventKind::RunFinished, finished_payload(&record));
            }
            *entry.record.lock().unwrap() = Some(record);
            runs.insert(entry.run_id.clone(), Arc::new(entry));
        }
    }

    fn entry(&self, run_id: &str) -> Result<Arc<RunEntry>, ApiError> {
        self.runs
            .lock()
            .unwrap()
            .get(run_id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(run_id))
    }

    pub fn active_runs(&self) -> usize {
        self.active.load(Ordering::SeqCst)
    }
}

fn finished_payload(record: &RunRecord) -> Value {
    json!({
        "status": record.status,
        "cancelled": record.cancelled,
        "attempts": record.attempts.len(),
        "attempts_to_pass": record.attempts_to_pass(),
        "total_usage": record.total_usage,
        "error": record.error,
    })
}

// ── handlers ──────────────────────────────────────────────────────────

async fn create_run(
    State(state): State<Arc<ServiceState>>,
    Json(req): Json<RunRequest>,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let cfg = &state.config;
    if req.prompt.trim().is_empty() {
        return Err(ApiError::bad_request("prompt", "prompt must not be empty"));
    }
    let backend_name = req.backend_name.clone().unwrap_or_else(|| cfg.default_backend.clone());
    let backend = state
        .backends
        .get(&backend_name)
        .cloned()
        .ok_or_else(|| ApiError::bad_request("backend_name", format!("unknown backend `{backend_name}`")))?;
    let max_attempts = req.max_attempts.unwrap_or(cfg.policy.max_attempts);
    if max_attempts == 0 || max_attempts > cfg.service.max_attempts_ceiling {
        return Err(ApiError::bad_request(
            "max_attempts",
            format!("max_attempts must lie in 1..={}", cfg.service.max_attempts_ceiling),
        ));
    }
    let prefix = match req.persist.unwrap_or(cfg.policy.persist) {
        false => None,
        true => Some(
            state
                .prefix()
                .cloned()
                .ok_or_else(|| ApiError::bad_request("persist", "no prefix_dir configured"))?,
        ),
    };
    let rag = match (req.rag_enabled, &state.rag) {
        (false, _) => None,
        (true, Some(index)) => Some(Arc::clone(index)),
        (true, None) => return Err(ApiError::bad_request("rag_enabled", "no retrieval index loaded")),
    };
    let validator = req.validator.clone().unwrap_or(ValidatorSpec::ExitCode);
    validator
        .check()
        .map_err(|e| ApiError::bad_request("validator", e.to_string()))?;

    let limit = cfg.service.max_concurrent_runs;
    if state
        .active
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| (n < limit).then_some(n + 1))
        .is_err()
    {
        return Err(ApiError {
            status: StatusCode::TOO_MANY_REQUESTS,
            code: "at_capacity",
            message: format!("{limit} run(s) already in progress"),
            field: None,
        });
    }

    let run_id = new_run_id();
    if let Some(p) = &prefix {
        if let Err(e) = fs::create_dir_all(persist::run_dir(p, &run_id)) {
            state.active.fetch_sub(1, Ordering::SeqCst);
            return Err(ApiError {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                code: "persistence",
                message: e.to_string(),
                field: None,
            });
        }
    }
    let entry = Arc::new(RunEntry::new(run_id.clone(), backend_name, req.prompt.clone()));
    state.runs.lock().unwrap().insert(run_id.clone(), Arc::clone(&entry));

    let worker_state = Arc::clone(&state);
    tokio::task::spawn_blocking(move || {
        let cfg = &worker_state.config;
        let relay = Relay(Arc::clone(&entry));
        let mut runner = Runner::new(cfg, Arc::clone(&backend))
            .with_run_id(entry.run_id.clone())
            .with_max_attempts(max_attempts)
            .with_persistence(prefix.clone())
            .with_cancel(entry.cancel.clone())
            .with_observer(&relay);
        if let Some(index) = rag.as_deref() {
            runner = runner.with_rag(index, &*backend);
        }
        let record = runner.run(&req.prompt, &validator);
        let payload = finished_payload(&record);
        *entry.record.lock().unwrap() = Some(record);
        entry.push(RunEventKind::RunFinished, payload);
        if let Some(p) = &prefix {
            let events = entry.events.lock().unwrap().clone();
            let path = persist::run_dir(p, &entry.run_id).join(EVENTS_FILE);
            let text = serde_json::to_string_pretty(&events).expect("events serialize");
            if let Err(e) = fs::write(&path, text) {
                tracing::error!(error = %e, path = %path.display(), "cannot write event log");
            }
        }
        worker_state.active.fetch_sub(1, Ordering::SeqCst);
    });

    Ok((StatusCode::ACCEPTED, Json(json!({ "run_id": run_id }))))
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    status: Option<String>,
}

async fn list_runs(
    State(state): State<Arc<ServiceState>>,
    Query(q): Query<ListQuery>,
) -> Result<Json<Vec<RunSummary>>, ApiError> {
    let entries: Vec<Arc<RunEntry>> = state.runs.lock().unwrap().values().cloned().collect();
    let summaries = entries.iter().map(|e| e.summary());
    let filtered: Vec<RunSummary> = match q.status.as_deref() {
        None => summaries.collect(),
        Some("running") => summaries.filter(|s| s.state == RunState::Running).collect(),
        Some(wanted) => {
            let status: RunStatus = serde_json::from_value(json!(wanted))
                .map_err(|_| ApiError::bad_request("status", format!("unknown status `{wanted}`")))?;
            summaries.filter(|s| s.status == Some(status)).collect()
        }
    };
    Ok(Json(filtered))
}

async fn get_run(
    State(state): State<Arc<ServiceState>>,
    Path(run_id): Path<String>,
) -> Result<Json<RunDetail>, ApiError> {
    let entry = state.entry(&run_id)?;
    let summary = entry.summary();
    let record = entry.record.lock().unwrap().clone();
    Ok(Json(RunDetail { summary, record }))
}

async fn cancel_run(
    State(state): State<Arc<ServiceState>>,
    Path(run_id): Path<String>,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let entry = state.entry(&run_id)?;
    entry.cancel.cancel();
    Ok((StatusCode::ACCEPTED, Json(json!({"run_id": run_id, "cancel_requested": true}))))
}

async fn list_backends(State(state): State<Arc<ServiceState>>) -> Json<Value> {
    let cfg = &state.config;
    let backends: Vec<Value> = cfg
        .backends
        .iter()
        .map(|p| {
            json!({
                "name": p.name,
                "kind": p.kind,
                "model_id": p.model_id,
                "reasoning_effort": p.reasoning_effort,
            })
        })
        .collect();
    Json(json!({
        "default_backend": cfg.default_backend,
        "backends": backends,
        "max_attempts_ceiling": cfg.service.max_attempts_ceiling,
        "default_max_attempts": cfg.policy.max_attempts.min(cfg.service.max_attempts_ceiling),
        "persist_default": cfg.policy.persist && cfg.policy.prefix_dir.is_some(),
        "rag_available": state.rag.is_some(),
    }))
}

fn event_frame(e: &RunEvent) -> Event {
    let kind = serde_json::to_value(e.kind).expect("kind serializes");
    Event::default()
        .id(e.sequence.to_string())
        .event(kind.as_str().unwrap_or("event"))
        .data(serde_json::to_string(e).expect("event serializes"))
}

/// Replay from `after` then follow the live log until `run_finished`.
fn event_stream(entry: Arc<RunEntry>, after: usize) -> impl Stream<Item = Result<Event, Infallible>> {
    let rx = entry.tick.subscribe();
    stream::unfold((entry, rx, after, false), |(entry, mut rx, cursor, done)| async move {
        if done {
            return None;
        }
        loop {
            let next = entry.events.lock().unwrap().get(cursor).cloned();
            if let Some(e) = next {
                let finished = e.kind == RunEventKind::RunFinished;
                return Some((Ok(event_frame(&e)), (entry, rx, cursor + 1, finished)));
            }
            rx.changed().await.ok()?;
        }
    })
}

async fn stream_events(
    State(state): State<Arc<ServiceState>>,
    Path(run_id): Path<String>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let entry = state.entry(&run_id)?;
    let after = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    Ok(Sse::new(event_stream(entry, after)).keep_alive(KeepAlive::default()))
}

async fn require_token(State(state): State<Arc<ServiceState>>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.auth_token {
        let ok = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError {
                status: StatusCode::UNAUTHORIZED,
                code: "unauthorized",
                message: "missing or wrong bearer token".into(),
                field: None,
            }
            .into_response();
        }
    }
    next.run(request).await
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/v1/runs", post(create_run).get(list_runs))
        .route("/v1/runs/{id}", get(get_run))
        .route("/v1/runs/{id}/events", get(stream_events))
        .route("/v1/runs/{id}/cancel", post(cancel_run))
        .route("/v1/backends", get(list_backends))
        .layer(middleware::from_fn_with_state(Arc::clone(&state), require_token))
        .with_state(state)
}

/// Serve until ctrl-c.
pub async fn serve(state: Arc<ServiceState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
