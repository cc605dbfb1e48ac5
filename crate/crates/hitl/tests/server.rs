use cotransport::env::{EnvConfig, TransportEnv};
use cotransport::eval::{load_actors, run_episode, EpisodeMetrics};
use cotransport::marl::{Actor, TrainConfig, Trainer};
use cotransport::mdp::ACTION_DIM;
use cotransport::neural::ActMode;
use cotransport::scenario::builtin;
use cotransport_hitl::{
    replay_log, Client, ClientMsg, CommandLog, Server, ServerConfig, ServerMsg, SessionConfig, SCHEMA,
};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

struct Running {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Drop for Running {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn start(id: &str, robot: Actor, session: SessionConfig, log_dir: Option<&Path>) -> Running {
    let cfg = ServerConfig {
        addr: "127.0.0.1:0".into(),
        session,
        log_dir: log_dir.map(Path::to_path_buf),
    };
    let server = Server::bind(builtin(id).unwrap(), EnvConfig::default(), robot, cfg).unwrap();
    let addr = server.local_addr().unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    let handle = thread::spawn(move || server.serve(&s, None).unwrap());
    Running { addr, stop, handle: Some(handle) }
}

fn unpaced() -> SessionConfig {
    SessionConfig { speed: 0.0, ..Default::default() }
}

fn trained_robot(dir: &Path) -> Actor {
    let cfg = TrainConfig {
        scenario: "S21".into(),
        n_envs: 2,
        horizon: 8,
        total_steps: 32,
        epochs: 1,
        minibatch: 8,
        hidden: vec![16, 16],
        checkpoint_every: 0,
        scripted_partner: true,
        ..Default::default()
    };
    let mut t = Trainer::new(cfg).unwrap();
    t.run(None, |_, _| false).unwrap();
    t.save(dir).unwrap();
    let [robot, partner] = load_actors(dir).unwrap();
    assert!(matches!(partner, Actor::Scripted));
    robot
}

/// Plays one episode as a client that always sends a zero command.
fn zero_client(addr: SocketAddr, seed: u64) -> EpisodeMetrics {
    let mut c = Client::connect(addr).unwrap();
    let ServerMsg::Hello { schema, scenario, .. } = c.recv().unwrap() else { panic!("expected hello") };
    assert_eq!(schema, SCHEMA);
    assert_eq!(scenario.id, "S21");
    c.cmd([0.0; ACTION_DIM]).unwrap();
    c.reset(seed).unwrap();
    let mut last_seq = 0;
    loop {
        let m = c.recv().unwrap();
        assert!(m.seq() > last_seq, "sequence numbers must increase");
        last_seq = m.seq();
        match m {
            ServerMsg::State { .. } => c.cmd([0.0; ACTION_DIM]).unwrap(),
            ServerMsg::End { result, .. } => return result,
            other => panic!("unexpected {other:?}"),
        }
    }
}

fn wait_for_logs(dir: &Path, n: usize) -> Vec<std::path::PathBuf> {
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        let mut files: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        if files.len() >= n || Instant::now() > deadline {
            return files;
        }
        thread::sleep(Duration::from_millis(10));
    }
}

#[test]
fn synthetic_client_completes_s21_and_logs_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let robot = trained_robot(&tmp.path().join("ckpt"));
    let seed = (0..20)
        .find(|&s| {
            let mut env = TransportEnv::new(builtin("S21").unwrap(), EnvConfig::default()).unwrap();
            run_episode(&mut env, &[robot.clone(), Actor::Scripted], s, ActMode::Mean, None).unwrap().success
        })
        .expect("some seed succeeds with a zero partner");

    let logs = tmp.path().join("logs");
    let srv = start("S21", robot.clone(), unpaced(), Some(&logs));
    let first = zero_client(srv.addr, seed);
    let second = zero_client(srv.addr, seed);
    assert!(first.success, "{first:?}");
    assert!(first.gamma_time.unwrap() <= 0.5 * builtin("S21").unwrap().episode_horizon as f64);
    assert_eq!(first, second);

    let files = wait_for_logs(&logs, 2);
    assert_eq!(files.len(), 2, "{files:?}");
    for f in &files {
        let log = CommandLog::load(f).unwrap();
        assert_eq!(log.header.seed, seed);
        assert_eq!(replay_log(&log, &robot).unwrap(), first);
    }
}

#[test]
fn second_client_is_turned_away() {
    let srv = start("corridor", Actor::Scripted, unpaced(), None);
    let mut a = Client::connect(srv.addr).unwrap();
    assert!(matches!(a.recv().unwrap(), ServerMsg::Hello { .. }));
    let mut b = Client::connect(srv.addr).unwrap();
    b.pause().unwrap();
    match b.recv().unwrap() {
        ServerMsg::Error { message, .. } => assert!(message.contains("already active")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn malformed_command_closes_session_with_error() {
    let srv = start("corridor", Actor::Scripted, unpaced(), None);
    let mut c = Client::connect(srv.addr).unwrap();
    c.recv().unwrap();
    c.send(&ClientMsg::Cmd { seq: 1, a: vec![0.0; 3] }).unwrap();
    loop {
        match c.recv() {
            Ok(ServerMsg::Error { message, .. }) => {
                assert!(message.contains("protocol violation"), "{message}");
                break;
            }
            Ok(_) => continue,
            Err(e) => panic!("connection closed without an error message: {e}"),
        }
    }
    assert!(c.recv().is_err());
}

#[test]
fn busy_port_is_reported() {
    let srv = start("corridor", Actor::Scripted, unpaced(), None);
    let cfg = ServerConfig { addr: srv.addr.to_string(), ..Default::default() };
    let err = Server::bind(builtin("corridor").unwrap(), EnvConfig::default(), Actor::Scripted, cfg)
        .err()
        .expect("second bind must fail");
    assert!(matches!(err, cotransport_hitl::HitlError::PortBusy(_)), "{err}");
}

#[test]
fn websocket_upgrade_speaks_the_same_schema() {
    use tungstenite::Message;
    let srv = start("corridor", Actor::Scripted, unpaced(), None);
    let (mut ws, _) = tungstenite::connect(format!("ws://{}/", srv.addr)).unwrap();
    let hello: ServerMsg = match ws.read().unwrap() {
        Message::Text(t) => serde_json::from_str(t.as_str()).unwrap(),
        other => panic!("unexpected {other:?}"),
    };
    assert!(matches!(hello, ServerMsg::Hello { ref schema, .. } if schema == SCHEMA));
    let reset = serde_json::to_string(&ClientMsg::Reset { seq: 1, seed: 2 }).unwrap();
    ws.send(Message::text(reset)).unwrap();
    loop {
        if let Message::Text(t) = ws.read().unwrap() {
            match serde_json::from_str::<ServerMsg>(t.as_str()).unwrap() {
                ServerMsg::End { result, .. } => {
                    assert!(result.success);
                    break;
                }
                ServerMsg::State { .. } => {}
                other => panic!("unexpected {other:?}"),
            }
        }
    }
    ws.close(None).unwrap();
}

#[test]
fn real_time_stream_is_at_least_20_hz_and_holds_while_paused() {
    let srv = start("corridor", Actor::Scripted, SessionConfig::default(), None);
    let mut c = Client::connect(srv.addr).unwrap();
    c.recv().unwrap();
    c.reset(0).unwrap();
    let t0 = Instant::now();
    let mut frames = 0;
    let mut last_t = 0.0;
    while t0.elapsed() < Duration::from_millis(1000) {
        if let ServerMsg::State { frame, .. } = c.recv().unwrap() {
            frames += 1;
            last_t = frame.metrics.time;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(frames as f64 / secs >= 20.0, "{frames} frames in {secs} s");
    // paced at real time, within scheduling slack
    assert!(last_t <= secs + 0.1 && last_t >= 0.5 * secs, "sim {last_t} s vs wall {secs} s");

    c.pause().unwrap();
    thread::sleep(Duration::from_millis(100));
    c.set_read_timeout(Duration::from_millis(100)).unwrap();
    let mut paused_at = last_t;
    while let Ok(m) = c.recv() {
        if let ServerMsg::State { frame, .. } = m {
            paused_at = frame.metrics.time;
        }
    }
    thread::sleep(Duration::from_millis(300));
    assert!(c.recv().is_err(), "frames arrived while paused");
    c.set_read_timeout(Duration::from_secs(5)).unwrap();
    c.resume().unwrap();
    let ServerMsg::State { frame, .. } = c.recv().unwrap() else { panic!() };
    assert!(frame.metrics.time > paused_at);
    assert!(frame.metrics.time < paused_at + 0.2);
}
