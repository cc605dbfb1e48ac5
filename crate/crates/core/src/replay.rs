//! `replay_v1`: one JSON header line (scenario, environment config, seed,
//! anchors, initial state) followed by one JSON line per policy step.

use crate::cognition::AnchorSequence;
use crate::env::{EnvConfig, EnvError, StepOutcome, Termination, TransportEnv};
use crate::mdp::ACTION_DIM;
use crate::scenario::Scenario;
use crate::sim::{StepEvents, TaskSpaceCommand, WorldState};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const REPLAY_SCHEMA: &str = "replay_v1";

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported replay schema {0}")]
    Schema(String),
    #[error("replay has no header")]
    Empty,
    #[error("step recorded before the header")]
    NotStarted,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayHeader {
    pub schema: String,
    pub scenario: Scenario,
    pub env: EnvConfig,
    pub seed: u64,
    pub anchors: Option<AnchorSequence>,
    pub initial: WorldState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayStep {
    pub t: usize,
    #[serde(rename = "world_state")]
    pub state: WorldState,
    pub actions: [[f64; ACTION_DIM]; 2],
    pub commands: [TaskSpaceCommand; 2],
    pub events: StepEvents,
    pub next: WorldState,
    pub reward: f64,
    pub done: bool,
    pub termination: Option<Termination>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub header: ReplayHeader,
    pub steps: Vec<ReplayStep>,
}

/// Collects one episode in memory.
#[derive(Debug, Clone, Default)]
pub struct ReplayWriter {
    header: Option<ReplayHeader>,
    steps: Vec<ReplayStep>,
}

impl ReplayWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts a new episode right after `env.reset(seed)`.
    pub fn begin(&mut self, env: &TransportEnv, seed: u64) -> Result<(), ReplayError> {
        self.header = Some(ReplayHeader {
            schema: REPLAY_SCHEMA.into(),
            scenario: env.scenario().clone(),
            env: env.cfg.clone(),
            seed,
            anchors: env.anchors().cloned(),
            initial: env.state().clone(),
        });
        self.steps.clear();
        Ok(())
    }

    pub fn step(
        &mut self,
        prev: &WorldState,
        actions: &[[f64; ACTION_DIM]; 2],
        out: &StepOutcome,
        env: &TransportEnv,
    ) -> Result<(), ReplayError> {
        if self.header.is_none() {
            return Err(ReplayError::NotStarted);
        }
        self.steps.push(ReplayStep {
            t: env.t() - 1,
            state: prev.clone(),
            actions: *actions,
            commands: out.commands,
            events: out.events,
            next: env.state().clone(),
            reward: out.rewards[0],
            done: out.done,
            termination: out.termination,
        });
        Ok(())
    }

    pub fn replay(&self) -> Result<Replay, ReplayError> {
        Ok(Replay {
            header: self.header.clone().ok_or(ReplayError::Empty)?,
            steps: self.steps.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ReplayError> {
        std::fs::write(path, self.replay()?.to_jsonl())?;
        Ok(())
    }
}

fn to_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("replay records serialize")
}

impl Replay {
    pub fn to_jsonl(&self) -> String {
        let mut s = to_line(&self.header);
        s.push('\n');
        for st in &self.steps {
            s.push_str(&to_line(st));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Replay, ReplayError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(ReplayError::Empty)?;
        let header: ReplayHeader = serde_json::from_str(first)
            .map_err(|e| ReplayError::Parse { line: 1, msg: e.to_string() })?;
        if header.schema != REPLAY_SCHEMA {
            return Err(ReplayError::Schema(header.schema));
        }
        let steps = lines
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| ReplayError::Parse { line: i + 1, msg: e.to_string() })
            })
            .collect::<Result<_, _>>()?;
        Ok(Replay { header, steps })
    }

    pub fn load(path: &Path) -> Result<Replay, ReplayError> {
        Replay::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayCheck {
    pub steps: usize,
    /// Steps whose stored successor differs from `Sim::step(state, commands)`.
    pub transition_mismatches: Vec<usize>,
    /// Steps where re-running the environment from the seed with the stored
    /// actions diverges from the stored successor.
    pub rerun_mismatches: Vec<usize>,
    pub anchors_match: bool,
}

impl ReplayCheck {
    pub fn is_exact(&self) -> bool {
        self.transition_mismatches.is_empty() && self.rerun_mismatches.is_empty() && self.anchors_match
    }
}

/// Reloads a replay and checks every stored successor state bit-exactly, both
/// transition by transition and by re-running the episode from its seed.
pub fn verify_replay(replay: &Replay) -> Result<ReplayCheck, ReplayError> {
    let h = &replay.header;
    let mut env = TransportEnv::new(h.scenario.clone(), h.env.clone())?;
    let mut transition_mismatches = Vec::new();
    for s in &replay.steps {
        let (next, _) = env.sim.step(&s.state, &s.commands)?;
        if next != s.next {
            transition_mismatches.push(s.t);
        }
    }
    env.reset(h.seed)?;
    let anchors_match = env.anchors() == h.anchors.as_ref() && env.state() == &h.initial;
    let mut rerun_mismatches = Vec::new();
    for s in &replay.steps {
        if env.is_done() {
            rerun_mismatches.push(s.t);
            continue;
        }
        env.step(&s.actions)?;
        if env.state() != &s.next {
            rerun_mismatches.push(s.t);
        }
    }
    Ok(ReplayCheck {
        steps: replay.steps.len(),
        transition_mismatches,
        rerun_mismatches,
        anchors_match,
    })
}
