//! Multi-session training service.
//!
//! | method | path                    | body / result                         |
//! |--------|-------------------------|---------------------------------------|
//! | POST   | `/sessions`             | [`RunSpec`] JSON → [`SessionInfo`]    |
//! | GET    | `/sessions`             | list of [`SessionInfo`]               |
//! | GET    | `/sessions/{id}`        | [`SessionInfo`]                       |
//! | GET    | `/sessions/{id}/log`    | experiment log, JSON lines            |
//! | GET    | `/sessions/{id}/stream` | WebSocket of [`WireMessage`] frames   |
//!
//! Sessions start idle; training begins on a `resume` or `train_n` control.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use latentloop_core::guidance::TargetLayout;
use latentloop_core::trainer::{SessionConfig, SessionState};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast::error::RecvError;

use crate::actor::{SessionActor, SystemClock};
use crate::logfile::to_jsonl;
use crate::runspec::RunSpec;
use crate::wire::{Body, WireError, WireMessage};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    /// Per-session output directories are created under this path.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub config: SessionConfig,
    pub state: SessionState,
    /// Unix milliseconds.
    pub created_at: u64,
    pub epochs_completed: usize,
    pub pending_edits: usize,
    /// Active teacher layout, once one has been committed.
    pub layout: Option<TargetLayout>,
}

struct Entry {
    actor: SessionActor,
    config: SessionConfig,
    created_at: u64,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Registry>,
}

struct Registry {
    sessions: Mutex<BTreeMap<String, Arc<Entry>>>,
    next_id: AtomicU64,
    config: ServerConfig,
}

#[derive(Serialize)]
struct ErrorReply {
    code: &'static str,
    detail: String,
}

fn reply_error(status: StatusCode, code: &'static str, detail: impl Into<String>) -> Response {
    (status, Json(ErrorReply { code, detail: detail.into() })).into_response()
}

impl AppState {
    pub fn new(config: ServerConfig) -> Self {
        AppState {
            inner: Arc::new(Registry { sessions: Mutex::new(BTreeMap::new()), next_id: AtomicU64::new(1), config }),
        }
    }

    fn get(&self, id: &str) -> Option<Arc<Entry>> {
        self.inner.sessions.lock().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }

    fn info(id: &str, e: &Entry) -> SessionInfo {
        let p = e.actor.published();
        SessionInfo {
            session_id: id.to_string(),
            config: e.config.clone(),
            state: p.state,
            created_at: e.created_at,
            epochs_completed: p.log.records.len(),
            pending_edits: p.pending_edits,
            layout: p.layout,
        }
    }

    /// Creates an idle interactive session.
    pub fn create(&self, spec: &RunSpec) -> Result<SessionInfo, String> {
        let (config, dataset) = spec.interactive().map_err(|e| e.to_string())?;
        let id = format!("s{:04}", self.inner.next_id.fetch_add(1, Ordering::Relaxed));
        let out = self.inner.config.out_dir.as_ref().map(|d| d.join(&id));
        let actor = SessionActor::spawn(&id, config.clone(), dataset, Box::new(SystemClock::new()), out)
            .map_err(|e| e.to_string())?;
        let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64);
        let entry = Arc::new(Entry { actor, config, created_at });
        let info = Self::info(&id, &entry);
        self.inner.sessions.lock().unwrap_or_else(|e| e.into_inner()).insert(id, entry);
        Ok(info)
    }

    /// Stops every worker after its current epoch; logs and checkpoints are
    /// on disk when this returns.
    pub fn shutdown(&self) {
        let entries: Vec<Arc<Entry>> =
            self.inner.sessions.lock().unwrap_or_else(|e| e.into_inner()).values().cloned().collect();
        for e in entries {
            let _ = e.actor.shutdown();
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/log", get(get_log))
        .route("/sessions/{id}/stream", get(open_stream))
        .with_state(state)
}

async fn create_session(State(app): State<AppState>, body: axum::body::Bytes) -> Response {
    let spec: RunSpec = match serde_json::from_slice(&body) {
        Ok(s) => s,
        Err(e) => return reply_error(StatusCode::BAD_REQUEST, "invalid_config", e.to_string()),
    };
    let created = tokio::task::spawn_blocking(move || app.create(&spec)).await;
    match created {
        Ok(Ok(info)) => (StatusCode::CREATED, Json(info)).into_response(),
        Ok(Err(detail)) => reply_error(StatusCode::BAD_REQUEST, "invalid_config", detail),
        Err(e) => reply_error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

async fn list_sessions(State(app): State<AppState>) -> Json<Vec<SessionInfo>> {
    let entries: Vec<(String, Arc<Entry>)> = app
        .inner
        .sessions
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Json(entries.iter().map(|(id, e)| AppState::info(id, e)).collect())
}

fn unknown(id: &str) -> Response {
    reply_error(StatusCode::NOT_FOUND, "unknown_session", format!("no session `{id}`"))
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> Response {
    match app.get(&id) {
        Some(e) => Json(AppState::info(&id, &e)).into_response(),
        None => unknown(&id),
    }
}

async fn get_log(State(app): State<AppState>, Path(id): Path<String>) -> Response {
    match app.get(&id) {
        Some(e) => {
            let text = to_jsonl(&e.actor.published().log);
            ([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response()
        }
        None => unknown(&id),
    }
}

async fn open_stream(State(app): State<AppState>, Path(id): Path<String>, ws: WebSocketUpgrade) -> Response {
    match app.get(&id) {
        Some(entry) => ws.on_upgrade(move |socket| stream(socket, id, entry)),
        None => unknown(&id),
    }
}

struct Outbox {
    session: String,
    seq: u64,
}

impl Outbox {
    fn frame(&mut self, body: Body) -> Message {
        self.seq += 1;
        Message::Text(WireMessage::new(&self.session, self.seq, body).to_text().into())
    }
}

/// Opening frames of a connection: hello, current state, latest snapshot.
fn greeting(entry: &Entry) -> Vec<Body> {
    let p = entry.actor.published();
    let mut out =
        vec![Body::Hello { config: entry.config.clone(), state: p.state.clone() }, Body::State { state: p.state }];
    if let Some(snapshot) = p.snapshot {
        out.push(Body::Snapshot { snapshot });
    }
    out
}

async fn dispatch(entry: &Entry, body: Body) -> Result<(), WireError> {
    match body {
        Body::Control { command } => entry.actor.control(command).await.map(|_| ()),
        Body::EditBatch { edits } => entry.actor.edits(edits).await.map(|_| ()),
        Body::Commit {} => entry.actor.commit().await.map(|_| ()),
        Body::Discard {} => entry.actor.discard().await.map(|_| ()),
        _ => unreachable!("parse_client admits client messages only"),
    }
}

async fn stream(socket: WebSocket, id: String, entry: Arc<Entry>) {
    let (mut sink, mut incoming) = socket.split();
    // subscribe before reading the published view so nothing falls between
    let mut events = entry.actor.subscribe();
    let mut out = Outbox { session: id.clone(), seq: 0 };
    for body in greeting(&entry) {
        if sink.send(out.frame(body)).await.is_err() {
            return;
        }
    }
    let mut last_client_seq = None;
    loop {
        tokio::select! {
            ev = events.recv() => {
                let bodies = match ev {
                    Ok(body) => vec![body],
                    Err(RecvError::Lagged(_)) => greeting(&entry).into_iter().skip(1).collect(),
                    Err(RecvError::Closed) => break,
                };
                for body in bodies {
                    if sink.send(out.frame(body)).await.is_err() {
                        return;
                    }
                }
            }
            msg = incoming.next() => {
                let text = match msg {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Binary(_))) => {
                        let err = Body::error(crate::wire::ErrorCode::BadMessage, "binary frames are not supported");
                        if sink.send(out.frame(err)).await.is_err() { return; }
                        continue;
                    }
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                let result = match WireMessage::parse_client(text.as_str(), &id, last_client_seq) {
                    Ok(msg) => {
                        last_client_seq = Some(msg.seq);
                        dispatch(&entry, msg.body).await
                    }
                    Err(e) => Err(e),
                };
                if let Err(e) = result {
                    if sink.send(out.frame(e.body())).await.is_err() {
                        return;
                    }
                }
            }
        }
    }
}

/// Binds `addr` and serves until `shutdown` resolves, then stops all
/// session workers.
pub async fn serve(
    addr: SocketAddr,
    config: ServerConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_on(listener, AppState::new(config), shutdown).await
}

pub async fn serve_on(
    listener: tokio::net::TcpListener,
    app: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let result = axum::serve(listener, router(app.clone())).with_graceful_shutdown(shutdown).await;
    let _ = tokio::task::spawn_blocking(move || app.shutdown()).await;
    result
}
