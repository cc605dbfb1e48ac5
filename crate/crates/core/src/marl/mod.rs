//! Centralized training with decentralized execution: two independent
//! Gaussian policies (no parameter sharing) updated with the clipped
//! surrogate on a shared advantage, and one critic over the global state and
//! the joint action trained on the one-step TD error.
//!
//! | piece | where |
//! |---|---|
//! | rollout collection | [`collect`] |
//! | advantages | [`gae()`] |
//! | policy / critic losses | [`ppo_loss`], [`critic_loss`] |
//! | updates | [`ppo_update`], [`critic_update`] |
//! | loop, metrics, checkpoints | [`Trainer`], [`train`], [`train_single_agent`] |
//! | target-drift diagnostic | [`prop1_diagnostic`] |
//! | finite-difference check of both losses | [`grad_oracle`] |

mod gae;
mod loss;
mod oracle;
mod prop1;
mod rollout;
mod trainer;
mod update;

pub use gae::{gae, normalize};
pub use loss::{
    critic_loss, critic_loss_grad, ppo_loss, ppo_loss_grad, td_targets, PolicyMinibatch, PpoStats,
};
pub use oracle::{grad_oracle, GradOracleConfig, GradOracleReport};
pub use prop1::{drift_schedule, prop1_diagnostic, DriftStep, Prop1Config, Prop1Report, ToyGame};
pub use rollout::{
    act_batch, collect, AdvantageBaseline, critic_input, scripted_policy, Actor, ActorOutput, EnvWorker,
    EpisodeRecord, RolloutBatch,
};
pub use trainer::{
    train, train_single_agent, RunDir, Trainer, UpdateMetrics, STATE_FORMAT,
};
pub use update::{compute_advantages, critic_update, minibatch_indices, ppo_update};

use crate::env::{EnvConfig, EnvError};
use crate::neural::{AdamConfig, NeuralError, DEFAULT_HIDDEN};
use crate::scenario::ScenarioError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarlError {
    #[error("environment {index}: {source}")]
    Env { index: usize, source: EnvError },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("non-finite {what} in update {update}")]
    NonFinite { what: &'static str, update: u64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for MarlError {
    fn from(e: std::io::Error) -> Self {
        MarlError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for MarlError {
    fn from(e: serde_json::Error) -> Self {
        MarlError::Io(e.to_string())
    }
}

/// How the `minibatch` value is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinibatchMode {
    /// Samples per minibatch.
    Size,
    /// Minibatches per epoch.
    Count,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Builtin scenario id or path to a scenario JSON file.
    pub scenario: String,
    pub seed: u64,
    pub n_envs: usize,
    /// Joint steps per environment per update.
    pub horizon: usize,
    pub total_steps: u64,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub minibatch: usize,
    pub minibatch_mode: MinibatchMode,
    pub entropy_coef: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub value_coef: f64,
    pub normalize_advantages: bool,
    /// Joint action the critic is evaluated at for the GAE values.
    pub advantage_baseline: AdvantageBaseline,
    pub adam: AdamConfig,
    pub hidden: Vec<usize>,
    pub log_std_init: f64,
    /// Gain of the policy output layer at initialization.
    pub policy_output_gain: f64,
    /// Agent 1 runs the scripted policy and is never updated.
    pub scripted_partner: bool,
    /// Updates between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Solver identifier; only the joint-critic clipped surrogate exists.
    pub solver: String,
    pub env: EnvConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scenario: "corridor".into(),
            seed: 0,
            n_envs: 16,
            horizon: 256,
            total_steps: 5_000_000,
            lr: 1e-4,
            schedule: LrSchedule::Cosine,
            epochs: 10,
            minibatch: 16,
            minibatch_mode: MinibatchMode::Size,
            entropy_coef: 0.01,
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            value_coef: 0.5,
            normalize_advantages: true,
            advantage_baseline: AdvantageBaseline::MeanAction,
            adam: AdamConfig::default(),
            hidden: DEFAULT_HIDDEN.to_vec(),
            log_std_init: -0.5,
            policy_output_gain: 0.01,
            scripted_partner: false,
            checkpoint_every: 50,
            solver: "joint_critic_ppo".into(),
            env: EnvConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.n_envs * self.horizon
    }

    /// Samples per minibatch.
    pub fn minibatch_size(&self) -> usize {
        match self.minibatch_mode {
            MinibatchMode::Size => self.minibatch,
            MinibatchMode::Count => self.batch_size() / self.minibatch.max(1),
        }
    }

    pub fn validate(&self) -> Result<(), MarlError> {
        let bad = |m: &str| Err(MarlError::Config(m.into()));
        if self.n_envs == 0 || self.horizon == 0 || self.epochs == 0 || self.minibatch == 0 {
            return bad("n_envs, horizon, epochs and minibatch must be positive");
        }
        if self.batch_size() % self.minibatch != 0 {
            return bad("minibatch must divide n_envs * horizon");
        }
        if !(self.lr > 0.0) || !(self.clip_eps > 0.0) {
            return bad("lr and clip_eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if self.solver != "joint_critic_ppo" {
            return Err(MarlError::Config(format!("unknown solver {}", self.solver)));
        }
        Ok(())
    }
}

/// Mixes a list of integers into one seed (splitmix64 finalizer per word).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.minibatch_size(), 16);
        assert_eq!(c.batch_size(), 4096);
    }

    #[test]
    fn minibatch_must_divide_batch() {
        let c = TrainConfig {
            n_envs: 3,
            horizon: 5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ_by_position() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_eq!(derive_seed(&[7, 0, 3]), derive_seed(&[7, 0, 3]));
    }
}
