//! Socket-free session logic. The caller feeds client messages and wall-clock
//! milliseconds and drives the simulation one substep at a time.

use crate::protocol::{clamp_command, ClientMsg, LiveMetrics, ProtocolError, ServerMsg, StateFrame, SCHEMA};
use crate::HitlError;
use cotransport::env::{EnvConfig, TransportEnv};
use cotransport::eval::{EpisodeMetrics, MetricsTracker};
use cotransport::marl::{act_batch, Actor};
use cotransport::mdp::{ACTION_DIM, OBS_DIM};
use cotransport::neural::ActMode;
use cotransport::scenario::Scenario;
use cotransport::sim::{StepEvents, TaskSpaceCommand, WorldState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const LOG_SCHEMA: &str = "hitl_log_v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    /// Age after which the latched human command is replaced by zeros.
    pub stale_ms: u64,
    /// Seed used when the client resumes without sending `reset`.
    pub seed: u64,
    /// Simulated seconds per wall-clock second; 0 runs unpaced.
    pub speed: f64,
    /// Substeps between state frames.
    pub state_every: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            stale_ms: 500,
            seed: 0,
            speed: 1.0,
            state_every: 1,
        }
    }
}

/// Last human command and the time it arrived.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CommandLatch {
    pub a: [f64; ACTION_DIM],
    pub received_ms: Option<u64>,
    pub seq: Option<u64>,
}

impl CommandLatch {
    pub fn set(&mut self, a: [f64; ACTION_DIM], now_ms: u64, seq: u64) {
        self.a = a;
        self.received_ms = Some(now_ms);
        self.seq = Some(seq);
    }

    /// The latched command, or zeros when none arrived within `stale_ms`.
    pub fn sample(&self, now_ms: u64, stale_ms: u64) -> ([f64; ACTION_DIM], bool) {
        match self.received_ms {
            Some(t) if now_ms.saturating_sub(t) <= stale_ms => (self.a, false),
            _ => ([0.0; ACTION_DIM], true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema: String,
    pub scenario: Scenario,
    pub env: EnvConfig,
    pub seed: u64,
    pub stale_ms: u64,
}

/// Partner action applied at one policy step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub step: usize,
    pub a: [f64; ACTION_DIM],
    pub stale: bool,
    /// Sequence number of the latched `cmd`, if any.
    pub cmd_seq: Option<u64>,
}

/// JSONL: header line, then one [`TickRecord`] per policy step.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandLog {
    pub header: LogHeader,
    pub ticks: Vec<TickRecord>,
}

impl CommandLog {
    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&self.header).expect("header serializes");
        s.push('\n');
        for t in &self.ticks {
            s.push_str(&serde_json::to_string(t).expect("tick serializes"));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, HitlError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let bad = |line: usize, e: serde_json::Error| HitlError::Log(format!("line {}: {e}", line + 1));
        let (i, first) = lines.next().ok_or_else(|| HitlError::Log("empty log".into()))?;
        let header: LogHeader = serde_json::from_str(first).map_err(|e| bad(i, e))?;
        if header.schema != LOG_SCHEMA {
            return Err(HitlError::Log(format!("unsupported log schema {}", header.schema)));
        }
        let ticks = lines
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| bad(i, e)))
            .collect::<Result<_, _>>()?;
        Ok(Self { header, ticks })
    }

    pub fn load(path: &Path) -> Result<Self, HitlError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), HitlError> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

fn robot_action(robot: &Actor, env: &TransportEnv) -> Result<[f64; ACTION_DIM], HitlError> {
    // mean actions never touch the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let obs = env.observations();
    Ok(act_batch(robot, &obs[0..1], ActMode::Mean, &mut rng)?.actions[0])
}

/// Re-runs a logged episode offline with the same robot policy.
pub fn replay_log(log: &CommandLog, robot: &Actor) -> Result<EpisodeMetrics, HitlError> {
    let h = &log.header;
    let mut env = TransportEnv::new(h.scenario.clone(), h.env.clone())?;
    env.reset(h.seed)?;
    let mut tracker = MetricsTracker::new(&env, h.seed);
    for tick in &log.ticks {
        if env.is_done() {
            return Err(HitlError::Log(format!("step {} logged after the episode ended", tick.step)));
        }
        let a0 = robot_action(robot, &env)?;
        let out = env.step(&[a0, tick.a])?;
        tracker.record(&env, out.rewards[0], out.termination);
    }
    Ok(tracker.finish()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Connected; holding at reset until `reset` or `resume`.
    Waiting,
    Running,
    Paused,
    Ended,
}

/// Policy step in progress.
#[derive(Debug, Clone)]
struct Tick {
    commands: [TaskSpaceCommand; 2],
    prepared: [TaskSpaceCommand; 2],
    next: WorldState,
    events: StepEvents,
    sub: usize,
}

pub struct Session {
    env: TransportEnv,
    robot: Actor,
    cfg: SessionConfig,
    phase: Phase,
    latch: CommandLatch,
    last_client_seq: Option<u64>,
    seq: u64,
    seed: u64,
    tracker: Option<MetricsTracker>,
    log: Option<CommandLog>,
    tick: Option<Tick>,
    ret: f64,
    result: Option<EpisodeMetrics>,
    substeps: usize,
}

impl Session {
    pub fn new(scenario: Scenario, env_cfg: EnvConfig, robot: Actor, cfg: SessionConfig) -> Result<Self, HitlError> {
        if let Some(p) = robot.params() {
            if p.spec.input_dim != OBS_DIM || p.spec.output_dim != ACTION_DIM {
                return Err(HitlError::Checkpoint(format!(
                    "policy maps {} -> {}, scenario needs {OBS_DIM} -> {ACTION_DIM}",
                    p.spec.input_dim, p.spec.output_dim
                )));
            }
        }
        let mut env = TransportEnv::new(scenario, env_cfg)?;
        env.reset(cfg.seed)?;
        let substeps = env.sim.cfg.substeps();
        Ok(Self {
            env,
            robot,
            seed: cfg.seed,
            cfg,
            phase: Phase::Waiting,
            latch: CommandLatch::default(),
            last_client_seq: None,
            seq: 0,
            tracker: None,
            log: None,
            tick: None,
            ret: 0.0,
            result: None,
            substeps,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn env(&self) -> &TransportEnv {
        &self.env
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn log(&self) -> Option<&CommandLog> {
        self.log.as_ref()
    }

    pub fn substeps_per_step(&self) -> usize {
        self.substeps
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    pub fn hello(&mut self) -> ServerMsg {
        ServerMsg::Hello {
            seq: self.next_seq(),
            schema: SCHEMA.into(),
            scenario: self.env.scenario().clone(),
            stale_ms: self.cfg.stale_ms,
        }
    }

    pub fn error(&mut self, message: String) -> ServerMsg {
        ServerMsg::Error { seq: self.next_seq(), message }
    }

    /// Metrics of the finished episode.
    pub fn session_metrics(&self) -> Result<EpisodeMetrics, HitlError> {
        self.result.clone().ok_or(HitlError::NotEnded)
    }

    fn start_episode(&mut self, seed: u64) -> Result<(), HitlError> {
        self.env.reset(seed)?;
        self.seed = seed;
        self.tracker = Some(MetricsTracker::new(&self.env, seed));
        self.log = Some(CommandLog {
            header: LogHeader {
                schema: LOG_SCHEMA.into(),
                scenario: self.env.scenario().clone(),
                env: self.env.cfg.clone(),
                seed,
                stale_ms: self.cfg.stale_ms,
            },
            ticks: Vec::new(),
        });
        self.tick = None;
        self.ret = 0.0;
        self.result = None;
        self.phase = Phase::Running;
        Ok(())
    }

    /// Applies one client message. Protocol violations are returned as
    /// errors and should close the session.
    pub fn handle(&mut self, msg: ClientMsg, now_ms: u64) -> Result<Vec<ServerMsg>, HitlError> {
        let seq = msg.seq();
        if let Some(last) = self.last_client_seq {
            if seq <= last {
                return Err(ProtocolError::Sequence { last, got: seq }.into());
            }
        }
        self.last_client_seq = Some(seq);
        match msg {
            ClientMsg::Cmd { a, .. } => {
                self.latch.set(clamp_command(&a)?, now_ms, seq);
                Ok(vec![])
            }
            ClientMsg::Reset { seed, .. } => {
                self.start_episode(seed)?;
                Ok(vec![self.state_msg()])
            }
            ClientMsg::Pause { .. } => {
                if self.phase == Phase::Running {
                    self.phase = Phase::Paused;
                }
                Ok(vec![])
            }
            ClientMsg::Resume { .. } => match self.phase {
                Phase::Waiting => {
                    self.start_episode(self.cfg.seed)?;
                    Ok(vec![self.state_msg()])
                }
                Phase::Paused => {
                    self.phase = Phase::Running;
                    Ok(vec![])
                }
                Phase::Running | Phase::Ended => Ok(vec![]),
            },
        }
    }

    fn begin_tick(&mut self, now_ms: u64) -> Result<(), HitlError> {
        let a0 = robot_action(&self.robot, &self.env)?;
        let (a1, stale) = self.latch.sample(now_ms, self.cfg.stale_ms);
        let commands = self.env.commands(&[a0, a1])?;
        let prepared = self.env.sim.prepare(&commands)?;
        if let Some(log) = self.log.as_mut() {
            log.ticks.push(TickRecord {
                step: self.env.t(),
                a: a1,
                stale,
                cmd_seq: if stale { None } else { self.latch.seq },
            });
        }
        self.tick = Some(Tick {
            commands,
            prepared,
            next: self.env.state().clone(),
            events: StepEvents::default(),
            sub: 0,
        });
        Ok(())
    }

    /// Integrates one substep while running. The partner command is sampled
    /// from the latch at the first substep of every policy step.
    pub fn substep(&mut self, now_ms: u64) -> Result<Vec<ServerMsg>, HitlError> {
        if self.phase != Phase::Running {
            return Ok(vec![]);
        }
        if self.tick.is_none() {
            self.begin_tick(now_ms)?;
        }
        let tick = self.tick.as_mut().expect("tick started");
        let ev = self.env.sim.substep(&mut tick.next, &tick.prepared);
        tick.events.merge(ev);
        tick.sub += 1;
        let mut out = Vec::new();
        if tick.sub < self.substeps {
            if tick.sub % self.cfg.state_every.max(1) == 0 {
                out.push(self.state_msg());
            }
            return Ok(out);
        }
        let tick = self.tick.take().expect("tick started");
        let o = self.env.advance(tick.next, tick.events, tick.commands);
        self.ret += o.rewards[0];
        let tracker = self.tracker.as_mut().expect("episode started");
        tracker.record(&self.env, o.rewards[0], o.termination);
        let result = if o.done { Some(tracker.finish()?) } else { None };
        out.push(self.state_msg());
        if let Some(result) = result {
            self.result = Some(result.clone());
            self.phase = Phase::Ended;
            out.push(ServerMsg::End { seq: self.next_seq(), result });
        }
        Ok(out)
    }

    /// Runs unpaced until the episode ends or `max_substeps` are spent.
    pub fn run_to_end(&mut self, now_ms: u64, max_substeps: usize) -> Result<Vec<ServerMsg>, HitlError> {
        let mut out = Vec::new();
        for _ in 0..max_substeps {
            if self.phase != Phase::Running {
                break;
            }
            out.extend(self.substep(now_ms)?);
        }
        Ok(out)
    }

    pub fn state_frame(&self) -> StateFrame {
        let (state, sub) = match &self.tick {
            Some(t) => (&t.next, t.sub),
            None => (self.env.state(), 0),
        };
        let sc = self.env.scenario();
        let d_max = self.env.cfg.d_max;
        let rays = [0, 1].map(|i| self.env.frames()[i].env.iter().map(|f| (1.0 - f) * d_max).collect());
        StateFrame {
            t: self.env.t(),
            sub,
            agents: state.agents.clone(),
            object: state.object.clone(),
            contacts: state.contacts,
            dropped: state.dropped,
            anchors: self.env.anchors().cloned(),
            rays,
            metrics: LiveMetrics {
                time: self.env.t() as f64 * self.env.sim.cfg.dt_low() + sub as f64 * self.env.sim.cfg.dt_high(),
                steps: self.env.t(),
                ret: self.ret,
                anchor_index: self.env.tracker().index,
                tilt_deg: state.object.tilt_angle(sc.object.half_x, sc.object.half_y).to_degrees(),
            },
        }
    }

    fn state_msg(&mut self) -> ServerMsg {
        let frame = Box::new(self.state_frame());
        ServerMsg::State { seq: self.next_seq(), frame }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cotransport::scenario::builtin;

    fn session(id: &str) -> Session {
        let cfg = SessionConfig { speed: 0.0, ..Default::default() };
        Session::new(builtin(id).unwrap(), EnvConfig::default(), Actor::Scripted, cfg).unwrap()
    }

    fn cmd(seq: u64, v: f64) -> ClientMsg {
        ClientMsg::Cmd { seq, a: vec![v; ACTION_DIM] }
    }

    #[test]
    fn latch_goes_stale() {
        let mut l = CommandLatch::default();
        assert_eq!(l.sample(0, 500), ([0.0; ACTION_DIM], true));
        l.set([0.3; ACTION_DIM], 100, 1);
        assert_eq!(l.sample(600, 500), ([0.3; ACTION_DIM], false));
        assert_eq!(l.sample(601, 500), ([0.0; ACTION_DIM], true));
    }

    #[test]
    fn holds_at_reset_until_started() {
        let mut s = session("corridor");
        let before = s.env().state().clone();
        for _ in 0..10 {
            assert!(s.substep(0).unwrap().is_empty());
        }
        assert_eq!(s.env().state(), &before);
        assert_eq!(s.phase(), Phase::Waiting);
        assert!(matches!(s.session_metrics(), Err(HitlError::NotEnded)));
    }

    #[test]
    fn zero_commands_match_scripted_episode() {
        let mut s = session("corridor");
        s.handle(ClientMsg::Reset { seq: 1, seed: 3 }, 0).unwrap();
        let mut k = 2;
        while s.phase() == Phase::Running {
            s.handle(cmd(k, 0.0), 0).unwrap();
            k += 1;
            for _ in 0..s.substeps_per_step() {
                s.substep(0).unwrap();
            }
        }
        let live = s.session_metrics().unwrap();
        let mut env = TransportEnv::new(builtin("corridor").unwrap(), EnvConfig::default()).unwrap();
        let offline = cotransport::eval::run_episode(&mut env, &[Actor::Scripted, Actor::Scripted], 3, ActMode::Mean, None).unwrap();
        assert_eq!(live, offline);
        assert!(live.success);
    }

    #[test]
    fn command_applies_from_the_next_policy_step() {
        let mut s = session("corridor");
        s.handle(ClientMsg::Reset { seq: 1, seed: 0 }, 0).unwrap();
        s.substep(0).unwrap();
        s.handle(cmd(2, 0.5), 0).unwrap();
        s.run_to_end(0, 2 * s.substeps_per_step() - 1).unwrap();
        let ticks = &s.log().unwrap().ticks;
        assert_eq!(ticks[0].a, [0.0; ACTION_DIM]);
        assert_eq!(ticks[1].a, [0.5; ACTION_DIM]);
        assert_eq!(ticks[1].cmd_seq, Some(2));
    }

    #[test]
    fn stale_command_is_dropped() {
        let mut s = session("corridor");
        s.handle(ClientMsg::Reset { seq: 1, seed: 0 }, 0).unwrap();
        s.handle(cmd(2, 0.5), 0).unwrap();
        s.run_to_end(0, s.substeps_per_step()).unwrap();
        s.run_to_end(501, s.substeps_per_step()).unwrap();
        let ticks = &s.log().unwrap().ticks;
        assert!(!ticks[0].stale);
        assert!(ticks[1].stale);
        assert_eq!(ticks[1].a, [0.0; ACTION_DIM]);
    }

    #[test]
    fn non_monotone_sequence_rejected() {
        let mut s = session("corridor");
        s.handle(cmd(5, 0.0), 0).unwrap();
        assert!(matches!(
            s.handle(cmd(5, 0.0), 0),
            Err(HitlError::Protocol(ProtocolError::Sequence { .. }))
        ));
    }

    #[test]
    fn live_log_replays_to_identical_metrics() {
        let mut s = session("S21");
        s.handle(ClientMsg::Reset { seq: 1, seed: 11 }, 0).unwrap();
        let mut k = 2;
        let mut now = 0;
        while s.phase() == Phase::Running {
            // a wobbly partner with an occasional dropout
            let v = if k % 7 == 0 { 0.0 } else { 0.05 * ((k % 5) as f64 - 2.0) };
            if k % 11 != 0 {
                s.handle(cmd(k, v), now).unwrap();
            } else {
                now += 600;
            }
            k += 1;
            s.run_to_end(now, s.substeps_per_step()).unwrap();
        }
        let live = s.session_metrics().unwrap();
        let log = CommandLog::parse(&s.log().unwrap().to_jsonl()).unwrap();
        assert_eq!(&log, s.log().unwrap());
        assert_eq!(replay_log(&log, &Actor::Scripted).unwrap(), live);
    }

    #[test]
    fn end_message_follows_last_state() {
        let mut s = session("corridor");
        s.handle(ClientMsg::Reset { seq: 1, seed: 1 }, 0).unwrap();
        let msgs = s.run_to_end(0, 1_000_000).unwrap();
        let last = msgs.last().unwrap();
        assert!(matches!(last, ServerMsg::End { .. }));
        assert!(msgs.windows(2).all(|w| w[0].seq() < w[1].seq()));
    }
}
