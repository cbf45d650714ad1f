//! End-to-end tests of the HTTP and WebSocket service.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use latentloop::core::snapshot::LatentSnapshot;
use latentloop::core::trainer::SessionState;
use latentloop::logfile::parse_jsonl;
use latentloop::server::{serve_on, AppState, ServerConfig, SessionInfo};
use latentloop::wire::{Body, ErrorCode, WireMessage};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio::sync::oneshot;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

struct Server {
    addr: SocketAddr,
    out: tempfile::TempDir,
    stop: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<std::io::Result<()>>,
    http: reqwest::Client,
}

impl Server {
    async fn start() -> Server {
        let out = tempfile::tempdir().unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let (stop, stopped) = oneshot::channel::<()>();
        let app = AppState::new(ServerConfig { out_dir: Some(out.path().to_path_buf()) });
        let task = tokio::spawn(serve_on(listener, app, async {
            let _ = stopped.await;
        }));
        Server { addr, out, stop: Some(stop), task, http: reqwest::Client::new() }
    }

    fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    async fn create(&self, spec: Value) -> (u16, Value) {
        let r = self.http.post(self.url("/sessions")).json(&spec).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    async fn info(&self, id: &str) -> SessionInfo {
        self.http.get(self.url(&format!("/sessions/{id}"))).send().await.unwrap().json().await.unwrap()
    }

    async fn list(&self) -> Vec<SessionInfo> {
        self.http.get(self.url("/sessions")).send().await.unwrap().json().await.unwrap()
    }

    async fn connect(&self, id: &str) -> Ws {
        let (ws, _) =
            tokio_tungstenite::connect_async(format!("ws://{}/sessions/{id}/stream", self.addr)).await.unwrap();
        ws
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.out.path().join(id)
    }

    async fn stop(mut self) -> tempfile::TempDir {
        let _ = self.stop.take().unwrap().send(());
        self.task.await.unwrap().unwrap();
        self.out
    }
}

fn small_spec() -> Value {
    json!({"dataset": "rings", "epochs": 4, "pretrain": 2, "interventions": "2", "snapshot_size": 90})
}

/// Reads server frames, checking that sequence numbers have no gaps.
struct Reader {
    ws: Ws,
    seq: u64,
}

impl Reader {
    fn new(ws: Ws) -> Reader {
        Reader { ws, seq: 0 }
    }

    async fn next(&mut self) -> WireMessage {
        let frame = tokio::time::timeout(Duration::from_secs(120), self.ws.next())
            .await
            .expect("frame within timeout")
            .expect("stream open")
            .unwrap();
        let text = frame.into_text().unwrap().to_string();
        let msg: WireMessage = serde_json::from_str(&text).unwrap();
        assert_eq!(msg.v, 1);
        assert_eq!(msg.seq, self.seq + 1, "gap in server sequence numbers");
        self.seq = msg.seq;
        msg
    }

    /// Skips frames until `pred` matches one.
    async fn until(&mut self, mut pred: impl FnMut(&Body) -> bool) -> WireMessage {
        loop {
            let m = self.next().await;
            if pred(&m.body) {
                return m;
            }
        }
    }

    async fn send(&mut self, session: &str, seq: u64, body: Value) {
        let mut frame = json!({"v": 1, "session": session, "seq": seq});
        frame.as_object_mut().unwrap().extend(body.as_object().unwrap().clone());
        self.ws.send(Message::text(frame.to_string())).await.unwrap();
    }

    async fn send_raw(&mut self, m: Message) {
        self.ws.send(m).await.unwrap();
    }

    async fn expect_error(&mut self, code: ErrorCode) {
        match self.until(|b| matches!(b, Body::Error { .. })).await.body {
            Body::Error { code: got, detail } => assert_eq!(got, code, "{detail}"),
            _ => unreachable!(),
        }
    }
}

fn state_of(b: &Body) -> Option<&SessionState> {
    match b {
        Body::State { state } => Some(state),
        _ => None,
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn create_list_and_reject_bad_configs() {
    let server = Server::start().await;
    let (status, a) = server.create(small_spec()).await;
    assert_eq!(status, 201);
    let (_, b) = server.create(small_spec()).await;
    let a: SessionInfo = serde_json::from_value(a).unwrap();
    let b: SessionInfo = serde_json::from_value(b).unwrap();
    assert_ne!(a.session_id, b.session_id);
    assert_eq!(a.state, SessionState::Idle);
    assert_eq!(a.config.intervention_epochs, vec![2]);
    assert!(a.layout.is_none());

    let mut bad = small_spec();
    bad["alpha"] = json!(1.5);
    let (status, reply) = server.create(bad).await;
    assert_eq!(status, 400);
    assert_eq!(reply["code"], "invalid_config");
    let mut unknown_field = small_spec();
    unknown_field["learning_rat"] = json!(0.1);
    assert_eq!(server.create(unknown_field).await.0, 400);
    assert_eq!(server.create(json!({"dataset": "nope"})).await.0, 400);
    assert_eq!(server.list().await.len(), 2, "rejected configs must not create sessions");

    let r = server.http.get(server.url("/sessions/s9999")).send().await.unwrap();
    assert_eq!(r.status().as_u16(), 404);
    let r = server.http.get(server.url("/sessions/s9999/log")).send().await.unwrap();
    assert_eq!(r.status().as_u16(), 404);
    assert!(tokio_tungstenite::connect_async(format!("ws://{}/sessions/s9999/stream", server.addr)).await.is_err());
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn idle_session_rejects_edits_and_skips() {
    let server = Server::start().await;
    let (_, info) = server.create(small_spec()).await;
    let id = info["session_id"].as_str().unwrap().to_string();
    let mut r = Reader::new(server.connect(&id).await);
    assert!(matches!(r.next().await.body, Body::Hello { state: SessionState::Idle, .. }));
    assert_eq!(state_of(&r.next().await.body), Some(&SessionState::Idle));

    r.send(&id, 1, json!({"type": "edit_batch", "edits": [{"point_id": 0, "x": 0.0, "y": 0.0}]})).await;
    r.expect_error(ErrorCode::WrongState).await;
    r.send(&id, 2, json!({"type": "commit"})).await;
    r.expect_error(ErrorCode::WrongState).await;
    r.send(&id, 3, json!({"type": "control", "command": {"command": "skip_intervention"}})).await;
    r.expect_error(ErrorCode::IllegalTransition).await;
    r.send(&id, 4, json!({"type": "control", "command": {"command": "set_alpha", "value": 2.0}})).await;
    r.expect_error(ErrorCode::InvalidValue).await;
    assert_eq!(server.info(&id).await.state, SessionState::Idle);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn full_interactive_flow() {
    let server = Server::start().await;
    let (_, info) = server.create(small_spec()).await;
    let id = info["session_id"].as_str().unwrap().to_string();

    let mut a = Reader::new(server.connect(&id).await);
    let mut b = Reader::new(server.connect(&id).await);
    for r in [&mut a, &mut b] {
        assert!(matches!(r.next().await.body, Body::Hello { .. }));
        assert_eq!(state_of(&r.next().await.body), Some(&SessionState::Idle));
    }

    a.send(&id, 1, json!({"type": "control", "command": {"command": "resume"}})).await;
    let paused = |s: &Body| state_of(s) == Some(&SessionState::PausedAwaitingEdit { epoch: 2 });
    a.until(paused).await;
    let snap_a = match a.until(|b| matches!(b, Body::Snapshot { .. })).await.body {
        Body::Snapshot { snapshot } => snapshot,
        _ => unreachable!(),
    };
    b.until(paused).await;
    let snap_b = match b.until(|b| matches!(b, Body::Snapshot { .. })).await.body {
        Body::Snapshot { snapshot } => snapshot,
        _ => unreachable!(),
    };
    assert_eq!(snap_a.epoch, 2);
    assert_eq!(serde_json::to_string(&snap_a).unwrap(), serde_json::to_string(&snap_b).unwrap());
    assert!(snap_a.points.len() <= 90);

    // the snapshot file holds the same bytes the stream carried
    let file = std::fs::read(server.session_dir(&id).join("snapshots/epoch_002.json")).unwrap();
    assert_eq!(file, serde_json::to_vec(&snap_a).unwrap());
    let reparsed: LatentSnapshot = serde_json::from_slice(&file).unwrap();
    assert_eq!(serde_json::to_vec(&reparsed).unwrap(), file);

    // malformed and out-of-contract frames are answered and ignored
    a.send_raw(Message::text("{not json")).await;
    a.expect_error(ErrorCode::BadMessage).await;
    a.send_raw(Message::binary(vec![1u8, 2, 3])).await;
    a.expect_error(ErrorCode::BadMessage).await;
    a.send("other", 2, json!({"type": "commit"})).await;
    a.expect_error(ErrorCode::WrongSession).await;
    a.send_raw(Message::text(json!({"v": 2, "session": id, "seq": 3, "type": "commit"}).to_string())).await;
    a.expect_error(ErrorCode::UnsupportedVersion).await;
    a.send(&id, 1, json!({"type": "commit"})).await;
    a.expect_error(ErrorCode::StaleSeq).await;
    a.send(&id, 4, json!({"type": "edit_batch", "edits": [{"point_id": 0, "x": 0.0, "y": 0.0, "z": 1.0}]})).await;
    a.expect_error(ErrorCode::BadMessage).await;
    a.send(&id, 5, json!({"type": "edit_batch", "edits": [{"point_id": 999999, "x": 0.0, "y": 0.0}]})).await;
    a.expect_error(ErrorCode::UnknownPoint).await;
    a.send(&id, 6, json!({"type": "edit_batch", "edits": [{"class_id": 77, "dx": 0.0, "dy": 0.0}]})).await;
    a.expect_error(ErrorCode::UnknownClass).await;
    assert_eq!(server.info(&id).await.state, SessionState::PausedAwaitingEdit { epoch: 2 });

    // last write wins per point; a class drag is a rigid translation
    let first = snap_a.points[0];
    a.send(&id, 7, json!({"type": "edit_batch", "edits": [{"point_id": first.point_id, "x": 9.0, "y": 9.0}]})).await;
    let [x0, y0] = first.position;
    a.send(&id, 8, json!({"type": "edit_batch", "edits": [{"point_id": first.point_id, "x": x0, "y": y0}]})).await;
    while server.info(&id).await.pending_edits != 1 {
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let (dx, dy) = (0.5f32, -0.25f32);
    a.send(&id, 9, json!({"type": "edit_batch", "edits": [{"class_id": 0, "dx": dx, "dy": dy}]})).await;
    a.send(&id, 10, json!({"type": "commit"})).await;
    a.until(|s| state_of(s) == Some(&SessionState::Finished)).await;

    let info = server.info(&id).await;
    let layout = info.layout.expect("committed layout");
    assert_eq!(layout.layout_id, 1);
    assert_eq!(layout.committed_epoch, 2);
    for t in &layout.targets {
        let stat = snap_a.class_stats.get(t.class).unwrap();
        let shift = if t.class == 0 { [dx as f64, dy as f64] } else { [0.0, 0.0] };
        for ((target, seen), d) in t.center.iter().zip(stat.center).zip(shift) {
            assert!((target - (seen + d)).abs() < 1e-5, "class {}", t.class);
        }
        assert!((t.spread - stat.spread.unwrap()).abs() < 1e-5);
    }
    assert_eq!(info.epochs_completed, 4);

    // a reconnecting client is brought up to date
    let mut c = Reader::new(server.connect(&id).await);
    assert!(matches!(c.next().await.body, Body::Hello { state: SessionState::Finished, .. }));
    assert_eq!(state_of(&c.next().await.body), Some(&SessionState::Finished));
    match c.next().await.body {
        Body::Snapshot { snapshot } => assert_eq!(snapshot.epoch, 4),
        other => panic!("expected snapshot, got {other:?}"),
    }

    let r = server.http.get(server.url(&format!("/sessions/{id}/log"))).send().await.unwrap();
    assert_eq!(r.headers()["content-type"], "application/x-ndjson");
    let log = parse_jsonl(&r.text().await.unwrap()).unwrap();
    assert_eq!(log.records.len(), 4);
    assert_eq!(log.records[2].layout_id, Some(1));
    assert!(log.summary.is_some());

    let dir = server.session_dir(&id);
    let out = server.stop().await;
    assert!(dir.starts_with(out.path()));
    let on_disk = latentloop::logfile::read_log(&dir.join("log.jsonl")).unwrap();
    assert_eq!(on_disk.records, log.records);
    let ckpt = latentloop::checkpoint::load_checkpoint(&dir.join("checkpoint.bin")).unwrap();
    assert!(ckpt.projector.is_frozen());
}
