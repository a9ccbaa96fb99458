//! HTTP session API over a loaded model.
//!
//! ```text
//! POST   /sessions                 -> 201 {session_id}
//! POST   /sessions/{id}/messages   -> 200 {response, action, raw_action, malformed_action, fallback, turn_index}
//! GET    /sessions/{id}            -> 200 {session_id, turns: [...]}
//! DELETE /sessions/{id}            -> 204
//! ```

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::decode::{Assistant, DecodeSettings, Session, Strategy};
use crate::kb::KbMode;
use crate::text::{ActionCall, Provenance, Speaker};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub decode: DecodeSettings,
    pub kb_mode: KbMode,
    /// Default per-session KB seed when the creator does not pick one.
    pub kb_seed: u64,
    pub session_ttl: Duration,
    /// Append each session's turns as JSON lines under this directory.
    pub transcript_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            decode: DecodeSettings::default(),
            kb_mode: KbMode::Sampled(100),
            kb_seed: 0,
            session_ttl: Duration::from_secs(30 * 60),
            transcript_dir: None,
        }
    }
}

struct Entry {
    session: Arc<tokio::sync::Mutex<Session>>,
    last_used: Instant,
}

pub struct ServiceState {
    assistant: Arc<Assistant<f32>>,
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Entry>>,
}

impl ServiceState {
    pub fn new(assistant: Assistant<f32>, config: ServiceConfig) -> Arc<Self> {
        Arc::new(ServiceState {
            assistant: Arc::new(assistant),
            config,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    /// Drops sessions idle for longer than the TTL; returns how many.
    pub fn reap(&self) -> usize {
        let ttl = self.config.session_ttl;
        let mut table = self.sessions.lock().expect("session table poisoned");
        let before = table.len();
        table.retain(|_, e| e.last_used.elapsed() <= ttl);
        before - table.len()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table poisoned").len()
    }

    fn lookup(&self, id: &str) -> Option<Arc<tokio::sync::Mutex<Session>>> {
        self.reap();
        let mut table = self.sessions.lock().expect("session table poisoned");
        let e = table.get_mut(id)?;
        e.last_used = Instant::now();
        Some(e.session.clone())
    }

    fn persist(&self, session: &Session, from: usize) {
        let Some(dir) = &self.config.transcript_dir else { return };
        let path = dir.join(format!("{}.jsonl", session.id));
        let write = || -> std::io::Result<()> {
            std::fs::create_dir_all(dir)?;
            let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
            for i in from..session.turns.len() {
                writeln!(f, "{}", turn_json(session, i))?;
            }
            Ok(())
        };
        if let Err(e) = write() {
            log::warn!("transcript {}: {e}", path.display());
        }
    }
}

fn error(status: StatusCode, message: impl Into<String>, field: Option<&str>) -> Response {
    let mut body = json!({ "error": message.into() });
    if let Some(f) = field {
        body["field"] = json!(f);
    }
    (status, Json(body)).into_response()
}

fn not_found(id: &str) -> Response {
    error(StatusCode::NOT_FOUND, format!("no session `{id}`"), None)
}

#[derive(Serialize)]
struct SlotValue<'a> {
    slot: &'a str,
    value: &'a str,
}

fn action_json(a: &ActionCall) -> Value {
    let slots: Vec<SlotValue> = a.slots.iter().map(|(s, v)| SlotValue { slot: s, value: v }).collect();
    json!({ "name": a.name, "slots": slots, "text": a.to_string() })
}

fn turn_json(session: &Session, i: usize) -> Value {
    let t = &session.turns[i];
    let mut v = json!({
        "index": i,
        "speaker": match t.speaker { Speaker::User => "user", Speaker::Assistant => "assistant" },
        "text": t.text,
        "provenance": match t.provenance {
            Provenance::GroundTruth => "ground-truth",
            Provenance::UserTyped => "user-typed",
            Provenance::ModelGenerated => "model-generated",
        },
        "action": t.action.as_ref().map(action_json),
    });
    if let Some(Some(d)) = session.diagnostics.get(i) {
        v["raw_action"] = json!(d.raw_action);
        v["malformed_action"] = json!(d.malformed_action);
        v["fallback"] = json!(d.fallback);
    }
    v
}

fn parse_body(body: &Bytes) -> Result<serde_json::Map<String, Value>, Response> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(serde_json::Map::new());
    }
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(error(StatusCode::BAD_REQUEST, "body must be a JSON object", Some("-"))),
        Err(e) => Err(error(StatusCode::BAD_REQUEST, format!("malformed JSON: {e}"), Some("-"))),
    }
}

async fn create_session(State(state): State<Arc<ServiceState>>, body: Bytes) -> Response {
    let fields = match parse_body(&body) {
        Ok(f) => f,
        Err(r) => return r,
    };
    let mut settings = state.config.decode;
    let mut kb_mode = state.config.kb_mode;
    let mut kb_seed = state.config.kb_seed;
    if let Some(v) = fields.get("kb_seed") {
        match v.as_u64() {
            Some(s) => kb_seed = s,
            None => return error(StatusCode::BAD_REQUEST, "must be a non-negative integer", Some("kb_seed")),
        }
    }
    if let Some(v) = fields.get("kb_mode") {
        match v.as_str().map(str::parse::<KbMode>) {
            Some(Ok(m)) => kb_mode = m,
            _ => return error(StatusCode::BAD_REQUEST, "expected none | oracle | weak | sampled:N | full", Some("kb_mode")),
        }
    }
    if let Some(v) = fields.get("strategy") {
        match v.as_str().map(str::parse::<Strategy>) {
            Some(Ok(s)) => settings.strategy = s,
            _ => return error(StatusCode::BAD_REQUEST, "expected greedy | beam:N", Some("strategy")),
        }
    }
    if let Some(v) = fields.get("max_len") {
        match v.as_u64() {
            Some(n) if n >= 1 => settings.max_len = n as usize,
            _ => return error(StatusCode::BAD_REQUEST, "must be a positive integer", Some("max_len")),
        }
    }
    let id = format!("{:032x}", rand::rng().random::<u128>());
    let session = Session::new(id.clone(), kb_mode, kb_seed, settings);
    state.reap();
    state.sessions.lock().expect("session table poisoned").insert(
        id.clone(),
        Entry {
            session: Arc::new(tokio::sync::Mutex::new(session)),
            last_used: Instant::now(),
        },
    );
    (StatusCode::CREATED, Json(json!({ "session_id": id }))).into_response()
}

async fn send_message(State(state): State<Arc<ServiceState>>, Path(id): Path<String>, body: Bytes) -> Response {
    let fields = match parse_body(&body) {
        Ok(f) => f,
        Err(r) => return r,
    };
    let text = match fields.get("text") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        Some(Value::String(_)) => return error(StatusCode::BAD_REQUEST, "text is empty", Some("text")),
        Some(_) => return error(StatusCode::BAD_REQUEST, "text must be a string", Some("text")),
        None => return error(StatusCode::BAD_REQUEST, "missing", Some("text")),
    };
    let Some(session) = state.lookup(&id) else {
        return not_found(&id);
    };
    let guard = session.lock_owned().await;
    let worker = state.clone();
    let result = tokio::task::spawn_blocking(move || {
        let mut guard = guard;
        let from = guard.turns.len();
        let reply = worker.assistant.respond(&mut guard, &text);
        if reply.is_ok() {
            worker.persist(&guard, from);
        }
        reply
    })
    .await;
    match result {
        Ok(Ok(r)) => Json(json!({
            "response": r.response,
            "action": r.action.as_ref().map(action_json),
            "raw_action": r.raw_action,
            "malformed_action": r.malformed_action,
            "fallback": r.fallback,
            "turn_index": r.turn_index,
        }))
        .into_response(),
        Ok(Err(e)) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string(), None),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("decoder task failed: {e}"), None),
    }
}

async fn get_session(State(state): State<Arc<ServiceState>>, Path(id): Path<String>) -> Response {
    let Some(session) = state.lookup(&id) else {
        return not_found(&id);
    };
    let s = session.lock().await;
    let turns: Vec<Value> = (0..s.turns.len()).map(|i| turn_json(&s, i)).collect();
    Json(json!({
        "session_id": s.id,
        "kb_mode": s.kb_mode.to_string(),
        "kb_seed": s.kb_seed,
        "decode": s.settings,
        "turns": turns,
    }))
    .into_response()
}

async fn delete_session(State(state): State<Arc<ServiceState>>, Path(id): Path<String>) -> Response {
    let removed = state.sessions.lock().expect("session table poisoned").remove(&id);
    match removed {
        Some(_) => StatusCode::NO_CONTENT.into_response(),
        None => not_found(&id),
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/messages", post(send_message))
        .with_state(state)
}

/// Serves until ctrl-c, reaping idle sessions in the background.
pub async fn serve(addr: SocketAddr, state: Arc<ServiceState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let reaper = state.clone();
    let period = (state.config.session_ttl / 2).max(Duration::from_secs(1));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let n = reaper.reap();
            if n > 0 {
                log::info!("reaped {n} idle sessions");
            }
        }
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
