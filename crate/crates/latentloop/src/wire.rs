//! Messages exchanged over a session stream.
//!
//! Every message is one JSON text frame:
//!
//! ```json
//! {"v":1,"session":"s0001","seq":7,"type":"control","command":{"command":"set_alpha","value":0.3}}
//! ```
//!
//! `v` is the schema version, `session` the session id and `seq` a per-sender
//! sequence number: the server numbers its frames 1, 2, 3, ... on each
//! connection, and a client's numbers must strictly increase.

use latentloop_core::snapshot::{LatentSnapshot, PointId};
use latentloop_core::trainer::{Control, EpochRecord, SessionConfig, SessionState};
use serde::{Deserialize, Serialize};

pub const WIRE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub v: u32,
    pub session: String,
    pub seq: u64,
    #[serde(flatten)]
    pub body: Body,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum Body {
    // server -> client
    Hello { config: SessionConfig, state: SessionState },
    Snapshot { snapshot: LatentSnapshot },
    State { state: SessionState },
    Metrics { record: EpochRecord },
    Error { code: ErrorCode, detail: String },
    // client -> server
    Control { command: Control },
    EditBatch { edits: Vec<Edit> },
    Commit {},
    Discard {},
}

impl Body {
    pub fn from_client(&self) -> bool {
        matches!(self, Body::Control { .. } | Body::EditBatch { .. } | Body::Commit {} | Body::Discard {})
    }

    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Body {
        Body::Error { code, detail: detail.into() }
    }
}

/// A single point moved to `(x, y)`, or a whole class shifted by `(dx, dy)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "EditRepr", into = "EditRepr")]
pub enum Edit {
    Point { point_id: PointId, x: f32, y: f32 },
    ClassDrag { class_id: usize, dx: f32, dy: f32 },
}

#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointRepr {
    point_id: PointId,
    x: f32,
    y: f32,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassDragRepr {
    class_id: usize,
    dx: f32,
    dy: f32,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(untagged)]
enum EditRepr {
    Point(PointRepr),
    ClassDrag(ClassDragRepr),
}

impl From<EditRepr> for Edit {
    fn from(r: EditRepr) -> Self {
        match r {
            EditRepr::Point(p) => Edit::Point { point_id: p.point_id, x: p.x, y: p.y },
            EditRepr::ClassDrag(c) => Edit::ClassDrag { class_id: c.class_id, dx: c.dx, dy: c.dy },
        }
    }
}

impl From<Edit> for EditRepr {
    fn from(e: Edit) -> Self {
        match e {
            Edit::Point { point_id, x, y } => EditRepr::Point(PointRepr { point_id, x, y }),
            Edit::ClassDrag { class_id, dx, dy } => EditRepr::ClassDrag(ClassDragRepr { class_id, dx, dy }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadMessage,
    UnsupportedVersion,
    WrongSession,
    StaleSeq,
    IllegalTransition,
    WrongState,
    UnknownPoint,
    UnknownClass,
    InvalidValue,
    SessionEnded,
    TrainingFailed,
    Internal,
}

/// Error reply carried back to one client.
#[derive(Clone, Debug, PartialEq)]
pub struct WireError {
    pub code: ErrorCode,
    pub detail: String,
}

impl WireError {
    pub fn new(code: ErrorCode, detail: impl Into<String>) -> Self {
        WireError { code, detail: detail.into() }
    }

    pub fn body(&self) -> Body {
        Body::error(self.code, self.detail.clone())
    }
}

impl WireMessage {
    pub fn new(session: &str, seq: u64, body: Body) -> Self {
        WireMessage { v: WIRE_VERSION, session: session.to_string(), seq, body }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("wire messages serialize")
    }

    /// Parses and checks the envelope of a client frame.
    pub fn parse_client(text: &str, session: &str, last_seq: Option<u64>) -> Result<WireMessage, WireError> {
        let msg: WireMessage =
            serde_json::from_str(text).map_err(|e| WireError::new(ErrorCode::BadMessage, e.to_string()))?;
        if msg.v != WIRE_VERSION {
            return Err(WireError::new(
                ErrorCode::UnsupportedVersion,
                format!("v={} (server speaks {WIRE_VERSION})", msg.v),
            ));
        }
        if msg.session != session {
            return Err(WireError::new(
                ErrorCode::WrongSession,
                format!("connected to {session}, got {}", msg.session),
            ));
        }
        if last_seq.is_some_and(|last| msg.seq <= last) {
            return Err(WireError::new(
                ErrorCode::StaleSeq,
                format!("seq {} after {}", msg.seq, last_seq.unwrap_or(0)),
            ));
        }
        if !msg.body.from_client() {
            return Err(WireError::new(ErrorCode::BadMessage, "server-only message type"));
        }
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn envelope_layout() {
        let m = WireMessage::new("s1", 3, Body::Control { command: Control::SetAlpha { value: 0.25 } });
        let v: serde_json::Value = serde_json::from_str(&m.to_text()).unwrap();
        assert_eq!(
            v,
            json!({"v":1,"session":"s1","seq":3,"type":"control","command":{"command":"set_alpha","value":0.25}})
        );
        let back: WireMessage = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn edit_batch_forms() {
        let text = r#"{"v":1,"session":"s1","seq":1,"type":"edit_batch","edits":[{"point_id":4,"x":0.5,"y":-1.0},{"class_id":2,"dx":1.0,"dy":0.0}]}"#;
        let m = WireMessage::parse_client(text, "s1", None).unwrap();
        assert_eq!(
            m.body,
            Body::EditBatch {
                edits: vec![
                    Edit::Point { point_id: 4, x: 0.5, y: -1.0 },
                    Edit::ClassDrag { class_id: 2, dx: 1.0, dy: 0.0 }
                ]
            }
        );
        let bad = r#"{"v":1,"session":"s1","seq":1,"type":"edit_batch","edits":[{"point_id":4,"dx":1.0,"y":0}]}"#;
        assert_eq!(WireMessage::parse_client(bad, "s1", None).unwrap_err().code, ErrorCode::BadMessage);
    }

    #[test]
    fn commit_and_discard_are_empty_objects() {
        let m = WireMessage::new("s1", 1, Body::Commit {});
        assert_eq!(m.to_text(), r#"{"v":1,"session":"s1","seq":1,"type":"commit"}"#);
        let d: WireMessage = serde_json::from_str(r#"{"v":1,"session":"s1","seq":2,"type":"discard"}"#).unwrap();
        assert_eq!(d.body, Body::Discard {});
    }

    #[test]
    fn envelope_checks() {
        let ok = r#"{"v":1,"session":"s1","seq":5,"type":"commit"}"#;
        assert!(WireMessage::parse_client(ok, "s1", Some(4)).is_ok());
        assert_eq!(WireMessage::parse_client(ok, "s1", Some(5)).unwrap_err().code, ErrorCode::StaleSeq);
        assert_eq!(WireMessage::parse_client(ok, "s2", None).unwrap_err().code, ErrorCode::WrongSession);
        let v2 = r#"{"v":2,"session":"s1","seq":5,"type":"commit"}"#;
        assert_eq!(WireMessage::parse_client(v2, "s1", None).unwrap_err().code, ErrorCode::UnsupportedVersion);
        let server_only = r#"{"v":1,"session":"s1","seq":5,"type":"state","state":{"state":"idle"}}"#;
        assert_eq!(WireMessage::parse_client(server_only, "s1", None).unwrap_err().code, ErrorCode::BadMessage);
        for junk in ["", "[]", "{}", "null", r#"{"v":1}"#, r#"{"v":1,"session":"s1","seq":1,"type":"warp"}"#] {
            assert_eq!(WireMessage::parse_client(junk, "s1", None).unwrap_err().code, ErrorCode::BadMessage, "{junk}");
        }
    }

    #[test]
    fn error_codes_are_snake_case() {
        let m = WireMessage::new("s1", 1, Body::error(ErrorCode::WrongState, "paused only"));
        assert!(m.to_text().contains(r#""code":"wrong_state""#));
    }
}
