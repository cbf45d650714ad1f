//! One worker thread per session.
//!
//! The worker owns the [`Session`]; everything else talks to it through an
//! ordered request channel and listens on a broadcast channel. Requests are
//! consumed at batch boundaries while an epoch runs and immediately
//! otherwise. Pending edits live here, not in the trainer, until commit.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::Instant;

use latentloop_core::data::Dataset;
use latentloop_core::guidance::TargetLayout;
use latentloop_core::snapshot::{LatentSnapshot, PointId};
use latentloop_core::trainer::{
    Clock, Control, ExperimentLog, LiveControls, Session, SessionConfig, SessionState, TrainError,
};
use tokio::sync::{broadcast, oneshot};

use crate::checkpoint::save_checkpoint;
use crate::logfile::LogWriter;
use crate::wire::{Body, Edit, ErrorCode, WireError};

/// Milliseconds on a monotonic clock.
pub struct SystemClock(Instant);

impl SystemClock {
    pub fn new() -> Self {
        SystemClock(Instant::now())
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.0.elapsed().as_millis() as u64
    }
}

type Reply<T> = oneshot::Sender<Result<T, WireError>>;

enum Request {
    Control(Control, Reply<SessionState>),
    Edits(Vec<Edit>, Reply<usize>),
    Commit(Reply<u64>),
    Discard(Reply<SessionState>),
    Shutdown,
}

/// Latest published view of a session, readable without the worker.
#[derive(Clone, Debug)]
pub struct Published {
    pub state: SessionState,
    pub snapshot: Option<LatentSnapshot>,
    pub log: ExperimentLog,
    pub pending_edits: usize,
    pub layout: Option<TargetLayout>,
}

const BROADCAST_CAPACITY: usize = 256;

pub struct SessionActor {
    requests: Mutex<mpsc::Sender<Request>>,
    events: broadcast::Sender<Body>,
    published: Arc<Mutex<Published>>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

fn lock(p: &Mutex<Published>) -> MutexGuard<'_, Published> {
    p.lock().unwrap_or_else(|e| e.into_inner())
}

fn train_error(e: &TrainError) -> WireError {
    let code = match e {
        TrainError::IllegalTransition { .. } => ErrorCode::IllegalTransition,
        TrainError::Ended(_) => ErrorCode::SessionEnded,
        TrainError::InvalidConfig(_) | TrainError::Guidance(_) => ErrorCode::InvalidValue,
        TrainError::NonFinite { .. } => ErrorCode::TrainingFailed,
        _ => ErrorCode::Internal,
    };
    WireError::new(code, e.to_string())
}

fn ended() -> WireError {
    WireError::new(ErrorCode::SessionEnded, "session worker has stopped")
}

impl SessionActor {
    /// Starts the worker. `out_dir`, when given, receives `log.jsonl`
    /// (flushed per epoch), `snapshots/epoch_NNN.json` at pauses and
    /// `checkpoint.bin` when the session ends or shuts down.
    pub fn spawn(
        id: &str,
        config: SessionConfig,
        dataset: Dataset,
        clock: Box<dyn Clock>,
        out_dir: Option<PathBuf>,
    ) -> Result<Self, TrainError> {
        let session = Session::new(config, dataset, clock)?;
        let writer = match &out_dir {
            Some(dir) => {
                let io = |e: std::io::Error| TrainError::InvalidConfig(format!("output directory: {e}"));
                std::fs::create_dir_all(dir.join("snapshots")).map_err(io)?;
                Some(
                    LogWriter::create(&dir.join("log.jsonl"), session.config())
                        .map_err(|e| TrainError::InvalidConfig(e.to_string()))?,
                )
            }
            None => None,
        };
        let (tx, rx) = mpsc::channel();
        let (events, _) = broadcast::channel(BROADCAST_CAPACITY);
        let published = Arc::new(Mutex::new(Published {
            state: session.state().clone(),
            snapshot: None,
            log: session.log().clone(),
            pending_edits: 0,
            layout: None,
        }));
        let worker = Worker {
            session,
            rx,
            events: events.clone(),
            published: published.clone(),
            pending: BTreeMap::new(),
            writer,
            out_dir,
        };
        let handle = std::thread::Builder::new()
            .name(format!("session-{id}"))
            .spawn(move || worker.run())
            .map_err(|e| TrainError::InvalidConfig(format!("cannot start worker: {e}")))?;
        Ok(SessionActor { requests: Mutex::new(tx), events, published, worker: Mutex::new(Some(handle)) })
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Body> {
        self.events.subscribe()
    }

    pub fn published(&self) -> Published {
        lock(&self.published).clone()
    }

    pub fn state(&self) -> SessionState {
        lock(&self.published).state.clone()
    }

    async fn ask<T>(&self, make: impl FnOnce(Reply<T>) -> Request) -> Result<T, WireError> {
        let (tx, rx) = oneshot::channel();
        self.requests.lock().unwrap_or_else(|e| e.into_inner()).send(make(tx)).map_err(|_| ended())?;
        rx.await.map_err(|_| ended())?
    }

    pub async fn control(&self, cmd: Control) -> Result<SessionState, WireError> {
        self.ask(|r| Request::Control(cmd, r)).await
    }

    /// Adds edits to the pending buffer; returns the number of pending points.
    pub async fn edits(&self, edits: Vec<Edit>) -> Result<usize, WireError> {
        self.ask(|r| Request::Edits(edits, r)).await
    }

    pub async fn commit(&self) -> Result<u64, WireError> {
        self.ask(Request::Commit).await
    }

    pub async fn discard(&self) -> Result<SessionState, WireError> {
        self.ask(Request::Discard).await
    }

    /// Stops the worker after its current epoch and waits for it. False if
    /// the worker had panicked.
    pub fn shutdown(&self) -> bool {
        let _ = self.requests.lock().unwrap_or_else(|e| e.into_inner()).send(Request::Shutdown);
        match self.worker.lock().unwrap_or_else(|e| e.into_inner()).take() {
            Some(h) => h.join().is_ok(),
            None => true,
        }
    }
}

impl Drop for SessionActor {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

struct Worker {
    session: Session,
    rx: mpsc::Receiver<Request>,
    events: broadcast::Sender<Body>,
    published: Arc<Mutex<Published>>,
    pending: BTreeMap<PointId, [f32; 2]>,
    writer: Option<LogWriter>,
    out_dir: Option<PathBuf>,
}

impl Worker {
    fn run(mut self) {
        let mut stop = false;
        while !stop {
            if let SessionState::Training { .. } = self.session.state() {
                let rx = &self.rx;
                let result = self.session.advance_with(&mut |live: &mut LiveControls, state: &SessionState| {
                    while let Ok(req) = rx.try_recv() {
                        stop |= mid_epoch(req, live, state);
                    }
                });
                self.after_epoch(result);
                continue;
            }
            match self.rx.recv() {
                Ok(Request::Shutdown) | Err(_) => stop = true,
                Ok(req) => self.between_epochs(req),
            }
        }
        self.persist_checkpoint();
    }

    fn publish(&self, body: Body) {
        // no subscribers is fine
        let _ = self.events.send(body);
    }

    fn sync_published(&self, snapshot: Option<LatentSnapshot>) {
        let mut p = lock(&self.published);
        p.state = self.session.state().clone();
        p.log = self.session.log().clone();
        p.pending_edits = self.pending.len();
        p.layout = self.session.layout().cloned();
        if snapshot.is_some() {
            p.snapshot = snapshot;
        }
    }

    fn publish_state(&self) {
        self.sync_published(None);
        self.publish(Body::State { state: self.session.state().clone() });
    }

    fn after_epoch(&mut self, result: Result<latentloop_core::trainer::EpochRecord, TrainError>) {
        match result {
            Ok(record) => {
                if let Some(w) = &mut self.writer {
                    let _ = w.record(&record);
                }
                let snapshot = self.session.snapshot().ok();
                self.sync_published(snapshot.clone());
                self.publish(Body::Metrics { record });
                self.publish(Body::State { state: self.session.state().clone() });
                if let Some(s) = snapshot {
                    if matches!(self.session.state(), SessionState::PausedAwaitingEdit { .. }) {
                        self.persist_snapshot(&s);
                    }
                    self.publish(Body::Snapshot { snapshot: s });
                }
            }
            Err(e) => {
                self.publish_state();
                self.publish(Body::error(ErrorCode::TrainingFailed, e.to_string()));
            }
        }
        if self.session.state().is_terminal() {
            if let (Some(w), Some(s)) = (&mut self.writer, &self.session.log().summary) {
                let _ = w.summary(s);
            }
            self.persist_checkpoint();
        }
    }

    fn persist_snapshot(&self, s: &LatentSnapshot) {
        if let Some(dir) = &self.out_dir {
            let path = dir.join("snapshots").join(format!("epoch_{:03}.json", s.epoch));
            let _ = std::fs::write(path, serde_json::to_vec(s).expect("snapshot serializes"));
        }
    }

    fn persist_checkpoint(&self) {
        if let Some(dir) = &self.out_dir {
            let s = &self.session;
            let _ = save_checkpoint(&dir.join("checkpoint.bin"), s.backbone(), s.projector(), s.optimizer());
        }
    }

    fn between_epochs(&mut self, req: Request) {
        match req {
            Request::Control(cmd, reply) => {
                let before = self.session.state().clone();
                let r = self.session.control(cmd).map_err(|e| train_error(&e));
                if r.is_ok() && before != *self.session.state() {
                    self.pending.clear();
                    self.publish_state();
                }
                let _ = reply.send(r);
            }
            Request::Edits(edits, reply) => {
                let _ = reply.send(self.ingest(&edits));
                self.sync_published(None);
            }
            Request::Commit(reply) => {
                let r = self.commit();
                let _ = reply.send(r);
            }
            Request::Discard(reply) => {
                let r = self.session.control(Control::SkipIntervention).map_err(|e| wrong_state(&e, "discard"));
                if r.is_ok() {
                    self.pending.clear();
                    self.publish_state();
                }
                let _ = reply.send(r);
            }
            Request::Shutdown => unreachable!("handled by the caller"),
        }
    }

    fn paused_snapshot(&self) -> Result<LatentSnapshot, WireError> {
        if !matches!(self.session.state(), SessionState::PausedAwaitingEdit { .. }) {
            return Err(WireError::new(
                ErrorCode::WrongState,
                format!("edits need a paused session, state is {}", self.session.state()),
            ));
        }
        lock(&self.published)
            .snapshot
            .clone()
            .ok_or_else(|| WireError::new(ErrorCode::Internal, "no snapshot published"))
    }

    /// Validates the whole batch before touching the buffer.
    fn ingest(&mut self, edits: &[Edit]) -> Result<usize, WireError> {
        let snapshot = self.paused_snapshot()?;
        for e in edits {
            match *e {
                Edit::Point { point_id, x, y } => {
                    if snapshot.point(point_id).is_none() {
                        return Err(WireError::new(ErrorCode::UnknownPoint, format!("point {point_id}")));
                    }
                    if !(x.is_finite() && y.is_finite()) {
                        return Err(WireError::new(ErrorCode::InvalidValue, "non-finite position"));
                    }
                }
                Edit::ClassDrag { class_id, dx, dy } => {
                    if !snapshot.points.iter().any(|p| p.label == class_id) {
                        return Err(WireError::new(ErrorCode::UnknownClass, format!("class {class_id}")));
                    }
                    if !(dx.is_finite() && dy.is_finite()) {
                        return Err(WireError::new(ErrorCode::InvalidValue, "non-finite displacement"));
                    }
                }
            }
        }
        for e in edits {
            match *e {
                Edit::Point { point_id, x, y } => {
                    self.pending.insert(point_id, [x, y]);
                }
                // rigid translation from each point's current (possibly pending) position
                Edit::ClassDrag { class_id, dx, dy } => {
                    for p in snapshot.points.iter().filter(|p| p.label == class_id) {
                        let at = self.pending.get(&p.point_id).copied().unwrap_or(p.position);
                        self.pending.insert(p.point_id, [at[0] + dx, at[1] + dy]);
                    }
                }
            }
        }
        Ok(self.pending.len())
    }

    fn commit(&mut self) -> Result<u64, WireError> {
        if !matches!(self.session.state(), SessionState::PausedAwaitingEdit { .. }) {
            return Err(WireError::new(
                ErrorCode::WrongState,
                format!("commit needs a paused session, state is {}", self.session.state()),
            ));
        }
        let id = self.session.commit(&self.pending, "human").map_err(|e| train_error(&e))?;
        self.pending.clear();
        self.publish_state();
        Ok(id)
    }
}

fn wrong_state(e: &TrainError, what: &str) -> WireError {
    match e {
        TrainError::IllegalTransition { state, .. } => {
            WireError::new(ErrorCode::WrongState, format!("{what} needs a paused session, state is {state}"))
        }
        other => train_error(other),
    }
}

/// Handles one request while an epoch runs. Returns true on shutdown.
fn mid_epoch(req: Request, live: &mut LiveControls, state: &SessionState) -> bool {
    let busy = || WireError::new(ErrorCode::WrongState, format!("session is {state}"));
    match req {
        Request::Control(cmd, reply) => {
            let _ = reply.send(live.apply(cmd, state).map(|_| state.clone()).map_err(|e| train_error(&e)));
        }
        Request::Edits(_, reply) => {
            let _ = reply.send(Err(busy()));
        }
        Request::Commit(reply) => {
            let _ = reply.send(Err(busy()));
        }
        Request::Discard(reply) => {
            let _ = reply.send(Err(busy()));
        }
        Request::Shutdown => return true,
    }
    false
}
