//! Human-in-the-loop sessions: a trained robot policy drives agent 0 while a
//! remote client supplies agent 1's residual action in real time.
//!
//! Transport is `hitl_v1` ([`protocol`]) over a plain TCP socket or, for
//! browsers, a WebSocket reached through an HTTP upgrade on the same port.

pub mod client;
pub mod protocol;
pub mod server;
pub mod session;

pub use client::Client;
pub use protocol::{ClientMsg, LiveMetrics, ProtocolError, ServerMsg, StateFrame, SCHEMA};
pub use server::{Server, ServerConfig};
pub use session::{
    replay_log, CommandLatch, CommandLog, LogHeader, Phase, Session, SessionConfig, TickRecord, LOG_SCHEMA,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HitlError {
    #[error("port busy: {0}")]
    PortBusy(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Env(#[from] cotransport::env::EnvError),
    #[error(transparent)]
    Sim(#[from] cotransport::sim::SimError),
    #[error(transparent)]
    Eval(#[from] cotransport::eval::EvalError),
    #[error(transparent)]
    Marl(#[from] cotransport::marl::MarlError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("command log: {0}")]
    Log(String),
    #[error("episode has not ended")]
    NotEnded,
}
