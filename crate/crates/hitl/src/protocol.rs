//! `hitl_v1` messages. On a raw socket every message is a 4-byte big-endian
//! length followed by that many bytes of UTF-8 JSON. A connection whose
//! first bytes are `GET ` is upgraded to a WebSocket instead, and each text
//! message then carries exactly one JSON message.

use cotransport::cognition::AnchorSequence;
use cotransport::eval::EpisodeMetrics;
use cotransport::mdp::ACTION_DIM;
use cotransport::scenario::Scenario;
use cotransport::sim::{AgentState, ObjectState};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

pub const SCHEMA: &str = "hitl_v1";

/// Frames larger than this are a protocol violation.
pub const MAX_FRAME: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveMetrics {
    /// Simulated seconds since the episode started.
    pub time: f64,
    pub steps: usize,
    pub ret: f64,
    /// Index of the first anchor not yet reached.
    pub anchor_index: usize,
    pub tilt_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    /// Policy step.
    pub t: usize,
    /// Substep within the policy step.
    pub sub: usize,
    pub agents: [AgentState; 2],
    pub object: ObjectState,
    pub contacts: [bool; 4],
    pub dropped: bool,
    pub anchors: Option<AnchorSequence>,
    /// Ray lengths in metres per agent, from the last policy step.
    pub rays: [Vec<f64>; 2],
    pub metrics: LiveMetrics,
}

/// Server to client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Hello {
        seq: u64,
        schema: String,
        scenario: Scenario,
        stale_ms: u64,
    },
    State {
        seq: u64,
        #[serde(flatten)]
        frame: Box<StateFrame>,
    },
    End {
        seq: u64,
        result: EpisodeMetrics,
    },
    Error {
        seq: u64,
        message: String,
    },
}

impl ServerMsg {
    pub fn seq(&self) -> u64 {
        match self {
            ServerMsg::Hello { seq, .. }
            | ServerMsg::State { seq, .. }
            | ServerMsg::End { seq, .. }
            | ServerMsg::Error { seq, .. } => *seq,
        }
    }
}

/// Client to server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMsg {
    Cmd { seq: u64, a: Vec<f64> },
    Reset { seq: u64, seed: u64 },
    Pause { seq: u64 },
    Resume { seq: u64 },
}

impl ClientMsg {
    pub fn seq(&self) -> u64 {
        match self {
            ClientMsg::Cmd { seq, .. }
            | ClientMsg::Reset { seq, .. }
            | ClientMsg::Pause { seq }
            | ClientMsg::Resume { seq } => *seq,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("malformed message: {0}")]
    Json(#[from] serde_json::Error),
    #[error("sequence number {got} does not follow {last}")]
    Sequence { last: u64, got: u64 },
    #[error("cmd must have {ACTION_DIM} finite values")]
    BadCommand,
    #[error("websocket: {0}")]
    WebSocket(String),
    #[error("connection closed")]
    Closed,
}

/// Validates a command and clamps it into `[-1, 1]`.
pub fn clamp_command(a: &[f64]) -> Result<[f64; ACTION_DIM], ProtocolError> {
    if a.len() != ACTION_DIM || a.iter().any(|v| !v.is_finite()) {
        return Err(ProtocolError::BadCommand);
    }
    Ok(std::array::from_fn(|i| a[i].clamp(-1.0, 1.0)))
}

pub fn encode_frame<T: Serialize>(msg: &T) -> Vec<u8> {
    let body = serde_json::to_vec(msg).expect("messages serialize");
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn write_frame<T: Serialize>(w: &mut impl Write, msg: &T) -> Result<(), ProtocolError> {
    w.write_all(&encode_frame(msg))?;
    w.flush()?;
    Ok(())
}

/// Blocking read of one length-prefixed frame.
pub fn read_frame<T: for<'de> Deserialize<'de>>(r: &mut impl Read) -> Result<T, ProtocolError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Err(ProtocolError::Closed),
        other => other?,
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(ProtocolError::TooLarge(n));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)?;
    Ok(serde_json::from_slice(&body)?)
}

/// Incremental decoder for length-prefixed frames arriving in pieces.
#[derive(Debug, Default)]
pub struct FrameBuffer {
    buf: Vec<u8>,
}

impl FrameBuffer {
    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame body, if one has fully arrived.
    pub fn next_frame(&mut self) -> Result<Option<Vec<u8>>, ProtocolError> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let n = u32::from_be_bytes([self.buf[0], self.buf[1], self.buf[2], self.buf[3]]) as usize;
        if n > MAX_FRAME {
            return Err(ProtocolError::TooLarge(n));
        }
        if self.buf.len() < 4 + n {
            return Ok(None);
        }
        let body = self.buf[4..4 + n].to_vec();
        self.buf.drain(..4 + n);
        Ok(Some(body))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_round_trip_in_pieces() {
        let msgs = [
            ClientMsg::Reset { seq: 1, seed: 9 },
            ClientMsg::Cmd { seq: 2, a: vec![0.5; ACTION_DIM] },
            ClientMsg::Pause { seq: 3 },
        ];
        let bytes: Vec<u8> = msgs.iter().flat_map(encode_frame).collect();
        let mut fb = FrameBuffer::default();
        let mut got = Vec::new();
        for chunk in bytes.chunks(5) {
            fb.extend(chunk);
            while let Some(body) = fb.next_frame().unwrap() {
                got.push(serde_json::from_slice::<ClientMsg>(&body).unwrap());
            }
        }
        assert_eq!(got, msgs);
    }

    #[test]
    fn message_tags_are_snake_case() {
        let v = serde_json::to_value(ClientMsg::Resume { seq: 4 }).unwrap();
        assert_eq!(v["type"], "resume");
        let c: ClientMsg = serde_json::from_str(r#"{"type":"cmd","seq":1,"a":[0,0,0,0,0,0,0,0,0,0,2]}"#).unwrap();
        let ClientMsg::Cmd { a, .. } = c else { panic!() };
        assert_eq!(clamp_command(&a).unwrap()[10], 1.0);
    }

    #[test]
    fn short_or_non_finite_commands_rejected() {
        assert!(clamp_command(&[0.0; 3]).is_err());
        let mut a = vec![0.0; ACTION_DIM];
        a[0] = f64::NAN;
        assert!(clamp_command(&a).is_err());
    }

    #[test]
    fn oversized_frame_rejected() {
        let mut fb = FrameBuffer::default();
        fb.extend(&(MAX_FRAME as u32 + 1).to_be_bytes());
        assert!(matches!(fb.next_frame(), Err(ProtocolError::TooLarge(_))));
    }
}
