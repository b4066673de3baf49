//! Length-prefixed JSON frames shared by broker links, client sessions and
//! on-disk logs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::collections::BTreeMap;

use crate::graph::SpaceDoc;
use crate::interp::StateSnapshot;
use crate::model::Value;

/// Largest accepted payload.
pub const MAX_PAYLOAD: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Broker,
    Client,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Ordered,
    Optimistic,
    Snapshot,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ordered" => Ok(Mode::Ordered),
            "optimistic" => Ok(Mode::Optimistic),
            "snapshot" => Ok(Mode::Snapshot),
            _ => Err(format!("unknown mode `{s}` (expected ordered, optimistic or snapshot)")),
        }
    }
}

/// A graph change carried in-band by a space's stream, with the
/// declarations of the spaces it references so a broker whose view of the
/// graph lags can still apply it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Barrier {
    pub request_id: String,
    pub kind: String,
    pub payload: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub spaces: Vec<SpaceDoc>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub schemas: BTreeMap<String, String>,
}

/// One sequenced event on a stream or in a log. `prev` chains the events
/// a particular receiver is sent, so filtered streams still expose gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventFrame {
    pub space: String,
    pub seq: u64,
    #[serde(default)]
    pub prev: u64,
    pub values: Vec<Value>,
    pub origin: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub: Option<String>,
    /// Stream incarnation; bumped by every NACK so frames from an abandoned
    /// walk can be told apart.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub epoch: u64,
    /// Graph changes taking effect at this event.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub barriers: Vec<Barrier>,
    // Log-only provenance; stripped before anything is sent on a link.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arc: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pub_id: Option<u64>,
}

impl EventFrame {
    pub fn new(space: impl Into<String>, seq: u64, values: Vec<Value>, origin: impl Into<String>) -> Self {
        EventFrame {
            space: space.into(),
            seq,
            prev: 0,
            values,
            origin: origin.into(),
            sub: None,
            epoch: 0,
            barriers: Vec::new(),
            arc: None,
            src: None,
            part: None,
            pub_id: None,
        }
    }

    /// A log-only record of barriers confirmed ahead of the next event.
    pub fn is_marker(&self) -> bool {
        self.values.is_empty() && !self.barriers.is_empty()
    }

    /// Copy suitable for a link: chained to `prev`, provenance removed.
    pub fn for_link(&self, prev: u64, sub: Option<&str>, epoch: u64) -> EventFrame {
        EventFrame {
            space: self.space.clone(),
            seq: self.seq,
            prev,
            values: self.values.clone(),
            origin: self.origin.clone(),
            sub: sub.map(str::to_string),
            epoch,
            barriers: self.barriers.clone(),
            arc: None,
            src: None,
            part: None,
            pub_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Frame {
    Connect {
        id: String,
        role: Role,
    },
    Publish {
        space: String,
        values: Vec<Value>,
        pub_id: u64,
    },
    /// From a client: open or resume a subscription. Between brokers: a
    /// subscription route, `sub` naming the route.
    Subscribe {
        space: String,
        sub: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        predicate: Option<String>,
        #[serde(default)]
        mode: Mode,
        #[serde(default)]
        after: u64,
    },
    Unsubscribe {
        sub: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        space: Option<String>,
    },
    Event(EventFrame),
    /// Publish acknowledgement (`pub_id` + `seq`) or stream acknowledgement
    /// (`upto`, per space or per subscription).
    Ack {
        space: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sub: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        upto: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub_id: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seq: Option<u64>,
        #[serde(default, skip_serializing_if = "is_zero")]
        epoch: u64,
    },
    /// "Resend everything after `after`."
    Nack {
        space: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sub: Option<String>,
        after: u64,
        #[serde(default, skip_serializing_if = "is_zero")]
        epoch: u64,
    },
    /// Without `state`/`events` this is a request from a client holding
    /// `upto`. Otherwise the reply: a full state or compressed events
    /// (expansion layout, synthetic seqs `from+1..`), valid at `upto`.
    Snapshot {
        sub: String,
        space: String,
        upto: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        state: Option<StateSnapshot>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        events: Option<Vec<Vec<Value>>>,
        /// Seq the compressed `events` start after.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        from: Option<u64>,
    },
    MetaRequest {
        request_id: String,
        kind: String,
        payload: String,
        /// Broker that must act on this request; absent means the coordinator.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        to: Option<String>,
        /// Set by the coordinator when handing the change to a space's host.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        barrier: Option<Barrier>,
    },
    MetaConfirm {
        request_id: String,
        space: String,
        activation: u64,
        to: String,
    },
    Stats {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stats: Option<serde_json::Value>,
    },
    Error {
        code: String,
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub_id: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sub: Option<String>,
    },
}

fn is_zero(x: &u64) -> bool {
    *x == 0
}

pub const FRAME_TYPES: [&str; 12] = [
    "CONNECT",
    "PUBLISH",
    "SUBSCRIBE",
    "UNSUBSCRIBE",
    "EVENT",
    "ACK",
    "NACK",
    "SNAPSHOT",
    "META_REQUEST",
    "META_CONFIRM",
    "STATS",
    "ERROR",
];

impl Frame {
    pub fn type_name(&self) -> &'static str {
        match self {
            Frame::Connect { .. } => "CONNECT",
            Frame::Publish { .. } => "PUBLISH",
            Frame::Subscribe { .. } => "SUBSCRIBE",
            Frame::Unsubscribe { .. } => "UNSUBSCRIBE",
            Frame::Event(_) => "EVENT",
            Frame::Ack { .. } => "ACK",
            Frame::Nack { .. } => "NACK",
            Frame::Snapshot { .. } => "SNAPSHOT",
            Frame::MetaRequest { .. } => "META_REQUEST",
            Frame::MetaConfirm { .. } => "META_CONFIRM",
            Frame::Stats { .. } => "STATS",
            Frame::Error { .. } => "ERROR",
        }
    }

    pub fn error(code: &str, message: impl Into<String>) -> Frame {
        Frame::Error { code: code.into(), message: message.into(), pub_id: None, sub: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("payload of {0} bytes exceeds the 1 MiB limit")]
    TooLarge(usize),
    #[error("unknown frame type `{0}`")]
    UnknownType(String),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("truncated frame")]
    Truncated,
}

impl WireError {
    pub fn code(&self) -> &'static str {
        match self {
            WireError::TooLarge(_) => "too-large",
            WireError::UnknownType(_) => "unknown-type",
            WireError::Malformed(_) => "malformed",
            WireError::Truncated => "truncated",
        }
    }
}

pub fn encode_payload(frame: &Frame) -> Vec<u8> {
    serde_json::to_vec(frame).expect("frames serialize")
}

/// Length prefix plus payload.
pub fn encode(frame: &Frame) -> Vec<u8> {
    let payload = encode_payload(frame);
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn decode_payload(payload: &[u8]) -> Result<Frame, WireError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(WireError::TooLarge(payload.len()));
    }
    match serde_json::from_slice::<Frame>(payload) {
        Ok(f) => Ok(f),
        Err(e) => {
            // Distinguish an unknown `type` from other malformations.
            if let Ok(serde_json::Value::Object(obj)) = serde_json::from_slice::<serde_json::Value>(payload) {
                if let Some(serde_json::Value::String(t)) = obj.get("type") {
                    if !FRAME_TYPES.contains(&t.as_str()) {
                        return Err(WireError::UnknownType(t.clone()));
                    }
                }
            }
            Err(WireError::Malformed(e.to_string()))
        }
    }
}

/// Splits one frame off the front of `buf`. `Ok(None)` means more bytes are
/// needed; on success returns the frame and the number of bytes consumed.
pub fn decode(buf: &[u8]) -> Result<Option<(Result<Frame, WireError>, usize)>, WireError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if len > MAX_PAYLOAD {
        return Err(WireError::TooLarge(len));
    }
    if buf.len() < 4 + len {
        return Ok(None);
    }
    Ok(Some((decode_payload(&buf[4..4 + len]), 4 + len)))
}

/// Incremental decoder for a byte stream.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
}

impl FrameReader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame. A per-frame decoding error is returned in the
    /// inner result and the stream stays usable; an oversized length prefix
    /// is fatal.
    pub fn next_frame(&mut self) -> Result<Option<Result<Frame, WireError>>, WireError> {
        match decode(&self.buf)? {
            None => Ok(None),
            Some((frame, used)) => {
                self.buf.drain(..used);
                Ok(Some(frame))
            }
        }
    }
}
