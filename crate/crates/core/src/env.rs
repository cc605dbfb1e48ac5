//! Two-agent episodic environment: simulator, anchor planning at reset,
//! observation stacking, residual action mapping and the shared reward.

use crate::cognition::{plan_for_state, AnchorSequence, CognitionConfig, CognitionError};
use crate::geometry::Pose2;
use crate::grid::{rasterize, OccupancyGrid};
use crate::mdp::{
    build_frame, compute_reward, global_state, nominal_controller, residual_map, stack,
    AnchorTracker, ControlConfig, HistoryBuffer, ObservationFrame, RewardConfig, RewardOutcome,
    ACTION_DIM,
};
use crate::scenario::Scenario;
use crate::sim::{Sim, SimConfig, SimError, StepEvents, TaskSpaceCommand, WorldState};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("anchor planning failed: {0}")]
    Planning(#[from] CognitionError),
    #[error("non-finite action for agent {0}")]
    NonFiniteAction(usize),
    #[error("step called on a finished episode")]
    EpisodeOver,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub sim: SimConfig,
    pub control: ControlConfig,
    pub reward: RewardConfig,
    pub cognition: CognitionConfig,
    /// Rangefinder saturation distance (m).
    pub d_max: f64,
    /// When false no anchors are generated: the task block is zero and the
    /// nominal controller holds position.
    pub use_cognition: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            control: ControlConfig::default(),
            reward: RewardConfig::default(),
            cognition: CognitionConfig::default(),
            d_max: 4.0,
            use_cognition: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Goal,
    Drop,
    Timeout,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Stacked observations of both agents after the step.
    pub obs: [Vec<f64>; 2],
    /// Per-agent rewards; both entries are the shared team reward.
    pub rewards: [f64; 2],
    pub reward: RewardOutcome,
    pub done: bool,
    pub termination: Option<Termination>,
    pub events: StepEvents,
    /// Clamped commands that were applied.
    pub commands: [TaskSpaceCommand; 2],
}

/// Everything needed to continue an episode exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub state: WorldState,
    pub anchors: Option<AnchorSequence>,
    pub tracker: AnchorTracker,
    pub history: [HistoryBuffer; 2],
    pub t: usize,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct TransportEnv {
    pub sim: Sim,
    pub cfg: EnvConfig,
    grid: OccupancyGrid,
    state: WorldState,
    anchors: Option<AnchorSequence>,
    tracker: AnchorTracker,
    history: [HistoryBuffer; 2],
    frames: [ObservationFrame; 2],
    t: usize,
    done: bool,
}

impl TransportEnv {
    /// Builds the environment and resets it with seed 0.
    pub fn new(scenario: Scenario, cfg: EnvConfig) -> Result<Self, EnvError> {
        let grid = rasterize(&scenario, cfg.cognition.grid_cells);
        let sim = Sim::new(scenario, cfg.sim.clone());
        let state = sim.reset(0);
        let frames = [0, 1].map(|i| build_frame(&sim, &state, i, None, cfg.d_max));
        let mut env = Self {
            sim,
            cfg,
            grid,
            tracker: AnchorTracker::new(state.object.position()),
            state,
            anchors: None,
            history: Default::default(),
            frames,
            t: 0,
            done: false,
        };
        env.reset(0)?;
        Ok(env)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.sim.scenario
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn anchors(&self) -> Option<&AnchorSequence> {
        self.anchors.as_ref()
    }

    pub fn tracker(&self) -> &AnchorTracker {
        &self.tracker
    }

    pub fn frames(&self) -> &[ObservationFrame; 2] {
        &self.frames
    }

    /// Policy steps taken in the current episode.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn horizon(&self) -> usize {
        self.sim.scenario.episode_horizon
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Starts a new episode: jittered reset, then anchors planned from the
    /// agents' current views.
    pub fn reset(&mut self, seed: u64) -> Result<[Vec<f64>; 2], EnvError> {
        let state = self.sim.reset(seed);
        self.anchors = if self.cfg.use_cognition {
            let views: [Pose2; 2] = [state.agents[0].pose(), state.agents[1].pose()];
            Some(plan_for_state(
                &self.sim.scenario,
                &self.grid,
                state.object.position(),
                views,
                &self.cfg.cognition,
            )?)
        } else {
            None
        };
        self.tracker = AnchorTracker::new(state.object.position());
        self.state = state;
        self.history = Default::default();
        self.t = 0;
        self.done = false;
        self.refresh_frames();
        Ok(self.observations())
    }

    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            state: self.state.clone(),
            anchors: self.anchors.clone(),
            tracker: self.tracker,
            history: self.history.clone(),
            t: self.t,
            done: self.done,
        }
    }

    pub fn restore(&mut self, snap: EnvSnapshot) {
        self.state = snap.state;
        self.anchors = snap.anchors;
        self.tracker = snap.tracker;
        self.history = snap.history;
        self.t = snap.t;
        self.done = snap.done;
        self.refresh_frames();
    }

    /// Replaces the planned anchors, for example with an externally supplied plan.
    pub fn set_anchors(&mut self, anchors: AnchorSequence) {
        self.anchors = Some(anchors);
        self.refresh_frames();
    }

    fn guidance(&self) -> Option<(&AnchorSequence, usize)> {
        self.anchors.as_ref().map(|a| (a, self.tracker.index))
    }

    fn refresh_frames(&mut self) {
        self.frames = [0, 1].map(|i| {
            build_frame(&self.sim, &self.state, i, self.guidance(), self.cfg.d_max)
        });
    }

    /// Stacked 210-dim observations of both agents.
    pub fn observations(&self) -> [Vec<f64>; 2] {
        [0, 1].map(|i| stack(&self.frames[i], &self.history[i]).to_vec())
    }

    /// Critic state: both compressed frames and the elapsed episode fraction.
    pub fn global_state(&self) -> Vec<f64> {
        global_state(
            [&self.frames[0], &self.frames[1]],
            self.t as f64 / self.horizon() as f64,
        )
    }

    /// Nominal commands for the current state.
    pub fn base_commands(&self) -> [TaskSpaceCommand; 2] {
        let g = self.anchors.as_ref().map(|a| (a, &self.tracker));
        [0, 1].map(|i| nominal_controller(&self.sim, &self.state, i, g, &self.cfg.control))
    }

    /// Maps both policy actions through the residual parameterization.
    pub fn commands(&self, actions: &[[f64; ACTION_DIM]; 2]) -> Result<[TaskSpaceCommand; 2], EnvError> {
        for (i, a) in actions.iter().enumerate() {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(EnvError::NonFiniteAction(i));
            }
        }
        let base = self.base_commands();
        let m = &self.cfg.reward.scaling;
        Ok([0, 1].map(|i| {
            let a = actions[i].map(|v| v.clamp(-1.0, 1.0));
            residual_map(&self.sim, i, &a, &base[i], m)
        }))
    }

    /// One policy step of both agents.
    pub fn step(&mut self, actions: &[[f64; ACTION_DIM]; 2]) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let commands = self.commands(actions)?;
        let (next, events) = self.sim.step(&self.state, &commands)?;
        Ok(self.advance(next, events, commands))
    }

    /// Completes a policy step whose substeps were integrated by the caller.
    pub fn advance(
        &mut self,
        next: WorldState,
        events: StepEvents,
        commands: [TaskSpaceCommand; 2],
    ) -> StepOutcome {
        let mode = self.sim.scenario.task_mode;
        let reward = match &self.anchors {
            Some(seq) => compute_reward(&self.state, &next, seq, &mut self.tracker, &self.cfg.reward, mode),
            None => {
                let empty = AnchorSequence { anchors: Vec::new(), spacing: self.cfg.cognition.spacing };
                compute_reward(&self.state, &next, &empty, &mut self.tracker, &self.cfg.reward, mode)
            }
        };
        for i in 0..2 {
            self.history[i].push(self.frames[i].compressed());
        }
        self.state = next;
        self.t += 1;
        self.refresh_frames();
        let termination = if self.state.dropped {
            Some(Termination::Drop)
        } else if self.sim.detect_goal(&self.state) {
            Some(Termination::Goal)
        } else if self.t >= self.horizon() {
            Some(Termination::Timeout)
        } else {
            None
        };
        self.done = termination.is_some();
        StepOutcome {
            obs: self.observations(),
            rewards: [reward.reward; 2],
            reward,
            done: self.done,
            termination,
            events,
            commands,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{OBS_DIM, GLOBAL_STATE_DIM};
    use crate::scenario::{builtin, BUILTIN_IDS};

    #[test]
    fn every_builtin_resets_with_anchors() {
        for id in BUILTIN_IDS {
            let mut env = TransportEnv::new(builtin(id).unwrap(), EnvConfig::default()).unwrap();
            for seed in 0..10 {
                let obs = env.reset(seed).unwrap_or_else(|e| panic!("{id} seed {seed}: {e}"));
                assert_eq!(obs[0].len(), OBS_DIM);
                assert_eq!(env.global_state().len(), GLOBAL_STATE_DIM);
            }
        }
    }

    #[test]
    fn scripted_corridor_reaches_goal() {
        let mut env = TransportEnv::new(builtin("corridor").unwrap(), EnvConfig::default()).unwrap();
        for seed in 0..5 {
            env.reset(seed).unwrap();
            let mut last = None;
            while !env.is_done() {
                last = env.step(&[[0.0; ACTION_DIM]; 2]).unwrap().termination;
            }
            assert_eq!(last, Some(Termination::Goal), "seed {seed} t {}", env.t());
        }
    }

    #[test]
    fn snapshot_restore_continues_identically() {
        let mut env = TransportEnv::new(builtin("S11").unwrap(), EnvConfig::default()).unwrap();
        env.reset(3).unwrap();
        let a = [[0.3; ACTION_DIM], [-0.2; ACTION_DIM]];
        for _ in 0..4 {
            env.step(&a).unwrap();
        }
        let snap = env.snapshot();
        let json = serde_json::to_string(&snap).unwrap();
        let mut other = TransportEnv::new(builtin("S11").unwrap(), EnvConfig::default()).unwrap();
        other.restore(serde_json::from_str(&json).unwrap());
        assert_eq!(other.observations(), env.observations());
        let x = env.step(&a).unwrap();
        let y = other.step(&a).unwrap();
        assert_eq!(x.obs, y.obs);
        assert_eq!(x.rewards, y.rewards);
    }
}
