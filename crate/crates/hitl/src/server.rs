//! TCP front end. One session at a time; the simulation loop owns the
//! session and exchanges messages with the network loop through bounded
//! queues so that socket I/O never stalls physics.

use crate::protocol::{encode_frame, ClientMsg, FrameBuffer, ProtocolError, ServerMsg};
use crate::session::{Phase, Session, SessionConfig};
use crate::HitlError;
use cotransport::env::EnvConfig;
use cotransport::marl::Actor;
use cotransport::scenario::Scenario;
use crossbeam_queue::ArrayQueue;
use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};
use tungstenite::{Message, WebSocket};

const STATE_QUEUE: usize = 64;
const CONTROL_QUEUE: usize = 64;
const INBOUND_QUEUE: usize = 256;
/// How long a new connection may take to start an HTTP upgrade.
pub const UPGRADE_WINDOW: Duration = Duration::from_millis(200);

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub addr: String,
    pub session: SessionConfig,
    /// Completed episodes are written here as `session_SSS_episode_EEE.jsonl`.
    pub log_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8765".into(),
            session: SessionConfig::default(),
            log_dir: None,
        }
    }
}

enum Conn {
    Raw { stream: TcpStream, buf: FrameBuffer },
    Ws(Box<WebSocket<TcpStream>>),
}

impl Conn {
    /// Detects the transport from the first bytes and performs the HTTP
    /// upgrade for browser clients. Raw clients wait for `hello`, so silence
    /// for [`UPGRADE_WINDOW`] also selects the raw transport.
    fn open(stream: TcpStream) -> Result<Conn, HitlError> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(Duration::from_millis(10)))?;
        let mut head = [0u8; 4];
        let deadline = Instant::now() + UPGRADE_WINDOW;
        let mut upgrade = false;
        while Instant::now() < deadline {
            match stream.peek(&mut head) {
                Ok(0) => return Err(ProtocolError::Closed.into()),
                Ok(n) if n == 4 || !b"GET ".starts_with(&head[..n]) => {
                    upgrade = &head == b"GET ";
                    break;
                }
                Ok(_) => thread::sleep(Duration::from_millis(1)),
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
                Err(e) => return Err(e.into()),
            }
        }
        if upgrade {
            stream.set_read_timeout(Some(Duration::from_secs(5)))?;
            let ws = tungstenite::accept(stream).map_err(|e| ProtocolError::WebSocket(e.to_string()))?;
            ws.get_ref().set_read_timeout(Some(Duration::from_millis(2)))?;
            Ok(Conn::Ws(Box::new(ws)))
        } else {
            stream.set_read_timeout(Some(Duration::from_millis(2)))?;
            Ok(Conn::Raw { stream, buf: FrameBuffer::default() })
        }
    }

    fn send(&mut self, msg: &ServerMsg) -> Result<(), ProtocolError> {
        match self {
            Conn::Raw { stream, .. } => {
                stream.write_all(&encode_frame(msg))?;
                Ok(())
            }
            Conn::Ws(ws) => {
                let text = serde_json::to_string(msg)?;
                ws.send(Message::text(text)).map_err(|e| ProtocolError::WebSocket(e.to_string()))
            }
        }
    }

    /// Messages that arrived since the last call; waits at most the read
    /// timeout.
    fn poll(&mut self) -> Result<Vec<ClientMsg>, ProtocolError> {
        let mut out = Vec::new();
        match self {
            Conn::Raw { stream, buf } => {
                let mut chunk = [0u8; 4096];
                match stream.read(&mut chunk) {
                    Ok(0) => return Err(ProtocolError::Closed),
                    Ok(n) => buf.extend(&chunk[..n]),
                    Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
                    Err(e) => return Err(e.into()),
                }
                while let Some(body) = buf.next_frame()? {
                    out.push(serde_json::from_slice(&body)?);
                }
            }
            Conn::Ws(ws) => match ws.read() {
                Ok(Message::Text(t)) => out.push(serde_json::from_str(t.as_str())?),
                Ok(Message::Binary(b)) => out.push(serde_json::from_slice(&b)?),
                Ok(Message::Close(_)) => return Err(ProtocolError::Closed),
                Ok(_) => {}
                Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => {
                    return Err(ProtocolError::Closed)
                }
                Err(e) => return Err(ProtocolError::WebSocket(e.to_string())),
            },
        }
        Ok(out)
    }

    fn flush(&mut self) {
        if let Conn::Ws(ws) = self {
            let _ = ws.flush();
        }
    }

    fn close(&mut self) {
        match self {
            Conn::Raw { stream, .. } => {
                let _ = stream.shutdown(std::net::Shutdown::Both);
            }
            Conn::Ws(ws) => {
                let _ = ws.close(None);
                let _ = ws.flush();
            }
        }
    }
}

/// Queues shared by the two loops of one session.
struct Channels {
    inbound: ArrayQueue<ClientMsg>,
    /// Lossy: a full queue drops its oldest frame.
    states: ArrayQueue<ServerMsg>,
    /// Hello, end and error messages; never dropped.
    control: ArrayQueue<ServerMsg>,
    /// Set by either side to end the session.
    closed: AtomicBool,
    /// Set by the simulation loop once its last message is queued.
    drained: AtomicBool,
}

impl Channels {
    fn new() -> Self {
        Self {
            inbound: ArrayQueue::new(INBOUND_QUEUE),
            states: ArrayQueue::new(STATE_QUEUE),
            control: ArrayQueue::new(CONTROL_QUEUE),
            closed: AtomicBool::new(false),
            drained: AtomicBool::new(false),
        }
    }

    fn publish(&self, msg: ServerMsg) {
        match msg {
            ServerMsg::State { .. } => {
                self.states.force_push(msg);
            }
            other => {
                let mut m = other;
                while let Err(back) = self.control.push(m) {
                    if self.closed.load(Ordering::Acquire) {
                        return;
                    }
                    m = back;
                    thread::yield_now();
                }
            }
        }
    }
}

fn network_loop(mut conn: Conn, ch: &Channels) {
    let mut fail: Option<String> = None;
    loop {
        // control before states, then order by sequence number
        let mut out: Vec<ServerMsg> = std::iter::from_fn(|| ch.control.pop()).collect();
        out.extend(std::iter::from_fn(|| ch.states.pop()));
        out.sort_by_key(ServerMsg::seq);
        for m in &out {
            if let Err(e) = conn.send(m) {
                fail = Some(e.to_string());
                break;
            }
        }
        conn.flush();
        if fail.is_some() || (ch.drained.load(Ordering::Acquire) && ch.control.is_empty() && ch.states.is_empty()) {
            break;
        }
        match conn.poll() {
            Ok(msgs) => {
                for m in msgs {
                    let mut m = m;
                    // commands are never dropped; wait for room instead
                    while let Err(back) = ch.inbound.push(m) {
                        if ch.closed.load(Ordering::Acquire) {
                            break;
                        }
                        m = back;
                        thread::yield_now();
                    }
                }
            }
            Err(ProtocolError::Closed) => {
                fail = Some("client disconnected".into());
                break;
            }
            Err(e) => {
                // tell the client why before closing
                let msg = ServerMsg::Error { seq: u64::MAX, message: e.to_string() };
                let _ = conn.send(&msg);
                fail = Some(e.to_string());
                break;
            }
        }
    }
    if let Some(f) = fail {
        log::info!("network loop ended: {f}");
    }
    ch.closed.store(true, Ordering::Release);
    conn.close();
}

fn sim_loop(session: &mut Session, ch: &Channels, log_dir: Option<&PathBuf>, session_index: usize) {
    let start = Instant::now();
    let now_ms = || start.elapsed().as_millis() as u64;
    let hello = session.hello();
    ch.publish(hello);
    let speed = session.config().speed;
    let f_high = 1.0 / session.env().sim.cfg.dt_high();
    let mut budget = 0.0f64;
    let mut last = Instant::now();
    let mut episode = 0usize;
    let mut phase = session.phase();
    while !ch.closed.load(Ordering::Acquire) {
        while let Some(msg) = ch.inbound.pop() {
            match session.handle(msg, now_ms()) {
                Ok(out) => out.into_iter().for_each(|m| ch.publish(m)),
                Err(e) => {
                    let err = session.error(format!("protocol violation: {e}"));
                    ch.publish(err);
                    ch.drained.store(true, Ordering::Release);
                    return;
                }
            }
        }
        let now = Instant::now();
        let dt = now.duration_since(last).as_secs_f64();
        last = now;
        if session.phase() != Phase::Running {
            budget = 0.0;
            thread::sleep(Duration::from_millis(1));
        } else if speed > 0.0 {
            budget = (budget + dt * speed * f_high).min(f_high);
            while budget >= 1.0 && session.phase() == Phase::Running {
                budget -= 1.0;
                match session.substep(now_ms()) {
                    Ok(out) => out.into_iter().for_each(|m| ch.publish(m)),
                    Err(e) => {
                        let err = session.error(e.to_string());
                        ch.publish(err);
                        ch.drained.store(true, Ordering::Release);
                        return;
                    }
                }
            }
            thread::sleep(Duration::from_millis(1));
        } else {
            match session.substep(now_ms()) {
                Ok(out) => out.into_iter().for_each(|m| ch.publish(m)),
                Err(e) => {
                    let err = session.error(e.to_string());
                    ch.publish(err);
                    ch.drained.store(true, Ordering::Release);
                    return;
                }
            }
        }
        if phase != Phase::Ended && session.phase() == Phase::Ended {
            if let (Some(dir), Some(log)) = (log_dir, session.log()) {
                let path = dir.join(format!("session_{session_index:03}_episode_{episode:03}.jsonl"));
                if let Err(e) = log.save(&path) {
                    log::error!("could not write {}: {e}", path.display());
                }
            }
            episode += 1;
        }
        phase = session.phase();
    }
    ch.drained.store(true, Ordering::Release);
}

pub struct Server {
    listener: TcpListener,
    scenario: Scenario,
    env_cfg: EnvConfig,
    robot: Actor,
    cfg: ServerConfig,
    sessions: AtomicUsize,
}

impl Server {
    pub fn bind(scenario: Scenario, env_cfg: EnvConfig, robot: Actor, cfg: ServerConfig) -> Result<Self, HitlError> {
        // fail early on a checkpoint that does not fit the scenario
        Session::new(scenario.clone(), env_cfg.clone(), robot.clone(), cfg.session.clone())?;
        let listener = TcpListener::bind(&cfg.addr).map_err(|e| match e.kind() {
            ErrorKind::AddrInUse => HitlError::PortBusy(cfg.addr.clone()),
            _ => HitlError::Io(e),
        })?;
        listener.set_nonblocking(true)?;
        if let Some(dir) = &cfg.log_dir {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Self {
            listener,
            scenario,
            env_cfg,
            robot,
            cfg,
            sessions: AtomicUsize::new(0),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, HitlError> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts clients until `shutdown` is set or `max_sessions` sessions
    /// have finished. A second client while a session is live receives an
    /// error message and is disconnected.
    pub fn serve(&self, shutdown: &AtomicBool, max_sessions: Option<usize>) -> Result<(), HitlError> {
        let active = Arc::new(AtomicBool::new(false));
        let finished = Arc::new(AtomicUsize::new(0));
        let mut handles = Vec::new();
        while !shutdown.load(Ordering::Acquire) {
            if max_sessions.is_some_and(|m| finished.load(Ordering::Acquire) >= m) {
                break;
            }
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    stream.set_nonblocking(false)?;
                    if active.swap(true, Ordering::AcqRel) {
                        log::warn!("rejecting {peer}: a session is already active");
                        reject(stream);
                        continue;
                    }
                    log::info!("client {peer} connected");
                    let index = self.sessions.fetch_add(1, Ordering::AcqRel);
                    let session = Session::new(
                        self.scenario.clone(),
                        self.env_cfg.clone(),
                        self.robot.clone(),
                        self.cfg.session.clone(),
                    )?;
                    let log_dir = self.cfg.log_dir.clone();
                    let (active, finished) = (active.clone(), finished.clone());
                    handles.push(thread::spawn(move || {
                        run_connection(stream, session, log_dir, index);
                        active.store(false, Ordering::Release);
                        finished.fetch_add(1, Ordering::AcqRel);
                    }));
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(e.into()),
            }
        }
        for h in handles {
            let _ = h.join();
        }
        Ok(())
    }
}

fn reject(stream: TcpStream) {
    if let Ok(mut conn) = Conn::open(stream) {
        let _ = conn.send(&ServerMsg::Error { seq: 1, message: "a session is already active".into() });
        conn.flush();
        conn.close();
    }
}

fn run_connection(stream: TcpStream, mut session: Session, log_dir: Option<PathBuf>, index: usize) {
    let conn = match Conn::open(stream) {
        Ok(c) => c,
        Err(e) => {
            log::warn!("handshake failed: {e}");
            return;
        }
    };
    let ch = Channels::new();
    thread::scope(|s| {
        s.spawn(|| network_loop(conn, &ch));
        sim_loop(&mut session, &ch, log_dir.as_ref(), index);
    });
}
