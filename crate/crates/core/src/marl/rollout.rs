use super::{derive_seed, MarlError};
use crate::env::{Termination, TransportEnv};
use crate::mdp::{ACTION_DIM, CRITIC_INPUT_DIM, OBS_DIM};
use crate::neural::{log_one_minus_tanh_sq, policy_forward_batch, ActMode, NetworkParams};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How one agent chooses its residual action.
#[derive(Debug, Clone, PartialEq)]
pub enum Actor {
    Learned(NetworkParams),
    /// Always `a = 0`: the nominal controller unchanged.
    Scripted,
}

impl Actor {
    pub fn params(&self) -> Option<&NetworkParams> {
        match self {
            Actor::Learned(p) => Some(p),
            Actor::Scripted => None,
        }
    }
}

/// The scripted baseline action.
pub fn scripted_policy(_obs: &[f64], _agent: usize) -> [f64; ACTION_DIM] {
    [0.0; ACTION_DIM]
}

/// Actions of one agent for a batch of observations: squashed actions,
/// pre-squash samples and Gaussian log-densities of the samples.
pub struct ActorOutput {
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub pre_squash: Vec<[f64; ACTION_DIM]>,
    pub log_prob: Vec<f64>,
}

pub fn act_batch(
    actor: &Actor,
    obs: &[Vec<f64>],
    mode: ActMode,
    rng: &mut ChaCha8Rng,
) -> Result<ActorOutput, MarlError> {
    match actor {
        Actor::Scripted => Ok(ActorOutput {
            actions: obs.iter().enumerate().map(|(i, o)| scripted_policy(o, i)).collect(),
            pre_squash: vec![[0.0; ACTION_DIM]; obs.len()],
            log_prob: vec![0.0; obs.len()],
        }),
        Actor::Learned(p) => {
            let flat: Vec<f64> = obs.iter().flatten().copied().collect();
            let x = Array2::from_shape_vec((obs.len(), OBS_DIM), flat)
                .map_err(|e| MarlError::Config(e.to_string()))?;
            let samples = policy_forward_batch(p, &x, mode, rng)?;
            let mut out = ActorOutput {
                actions: Vec::with_capacity(obs.len()),
                pre_squash: Vec::with_capacity(obs.len()),
                log_prob: Vec::with_capacity(obs.len()),
            };
            for s in samples {
                let mut a = [0.0; ACTION_DIM];
                let mut u = [0.0; ACTION_DIM];
                a.copy_from_slice(&s.action);
                u.copy_from_slice(&s.pre_squash);
                // undo the squash correction: the ratio uses the Gaussian density
                let jac: f64 = s.pre_squash.iter().map(|&x| log_one_minus_tanh_sq(x)).sum();
                out.log_prob.push(s.log_prob + jac);
                out.actions.push(a);
                out.pre_squash.push(u);
            }
            Ok(out)
        }
    }
}

/// Critic input: global state followed by both agents' squashed actions.
pub fn critic_input(global: &[f64], actions: &[[f64; ACTION_DIM]; 2]) -> Vec<f64> {
    let mut v = global.to_vec();
    v.extend_from_slice(&actions[0]);
    v.extend_from_slice(&actions[1]);
    debug_assert_eq!(v.len(), CRITIC_INPUT_DIM);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub env: usize,
    pub seed: u64,
    pub ret: f64,
    pub len: usize,
    pub termination: Termination,
}

/// One environment with its episode bookkeeping.
#[derive(Debug, Clone)]
pub struct EnvWorker {
    pub env: TransportEnv,
    pub index: usize,
    pub base_seed: u64,
    pub episodes: u64,
    pub episode_seed: u64,
    pub ep_return: f64,
}

impl EnvWorker {
    pub fn new(env: TransportEnv, index: usize, base_seed: u64) -> Result<Self, MarlError> {
        let mut w = Self {
            env,
            index,
            base_seed,
            episodes: 0,
            episode_seed: 0,
            ep_return: 0.0,
        };
        w.start_episode()?;
        Ok(w)
    }

    pub fn start_episode(&mut self) -> Result<(), MarlError> {
        self.episode_seed = derive_seed(&[self.base_seed, self.index as u64, self.episodes]);
        self.env
            .reset(self.episode_seed)
            .map_err(|source| MarlError::Env { index: self.index, source })?;
        self.ep_return = 0.0;
        Ok(())
    }
}

/// Transitions of `n_envs x horizon` joint steps, env-major
/// (`index = env * horizon + t`).
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub n_envs: usize,
    pub horizon: usize,
    pub obs: [Array2<f64>; 2],
    pub pre_squash: [Array2<f64>; 2],
    pub actions: [Array2<f64>; 2],
    pub log_probs: [Vec<f64>; 2],
    pub critic_in: Array2<f64>,
    pub next_critic_in: Array2<f64>,
    pub rewards: [Vec<f64>; 2],
    pub dones: Vec<bool>,
    pub values: Vec<f64>,
    pub next_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub episodes: Vec<EpisodeRecord>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.dones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dones.is_empty()
    }

    fn zeros(n_envs: usize, horizon: usize) -> Self {
        let n = n_envs * horizon;
        let m = |c: usize| Array2::zeros((n, c));
        Self {
            n_envs,
            horizon,
            obs: [m(OBS_DIM), m(OBS_DIM)],
            pre_squash: [m(ACTION_DIM), m(ACTION_DIM)],
            actions: [m(ACTION_DIM), m(ACTION_DIM)],
            log_probs: [vec![0.0; n], vec![0.0; n]],
            critic_in: m(CRITIC_INPUT_DIM),
            next_critic_in: m(CRITIC_INPUT_DIM),
            rewards: [vec![0.0; n], vec![0.0; n]],
            dones: vec![false; n],
            values: vec![0.0; n],
            next_values: vec![0.0; n],
            advantages: vec![0.0; n],
            returns: vec![0.0; n],
            episodes: Vec::new(),
        }
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>, MarlError> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), CRITIC_INPUT_DIM), flat).map_err(|e| MarlError::Config(e.to_string()))
}

fn row_into(dst: &mut Array2<f64>, row: usize, src: &[f64]) {
    for (d, s) in dst.row_mut(row).iter_mut().zip(src) {
        *d = *s;
    }
}

/// Which joint action the critic is evaluated at for the GAE values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageBaseline {
    /// `Q(s_t, a_t)` at the sampled joint action.
    Sampled,
    /// `Q(s_t, mu(s_t))` at the joint mean action, a state-value estimate.
    MeanAction,
}

/// Runs every worker for `horizon` joint steps. Each agent acts only on its
/// own stacked observation; the critic sees the global state and the joint
/// action. Finished episodes restart immediately.
pub fn collect(
    workers: &mut [EnvWorker],
    actors: &[Actor; 2],
    critic: &NetworkParams,
    horizon: usize,
    baseline: AdvantageBaseline,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBatch, MarlError> {
    let n_envs = workers.len();
    let mut batch = RolloutBatch::zeros(n_envs, horizon);

    let decide = |workers: &[EnvWorker], rng: &mut ChaCha8Rng| -> Result<_, MarlError> {
        let obs: [Vec<Vec<f64>>; 2] = [0, 1].map(|i| {
            workers.iter().map(|w| w.env.observations()[i].clone()).collect()
        });
        let out0 = act_batch(&actors[0], &obs[0], ActMode::Sample, rng)?;
        let out1 = act_batch(&actors[1], &obs[1], ActMode::Sample, rng)?;
        let rows: Vec<Vec<f64>> = workers
            .iter()
            .enumerate()
            .map(|(e, w)| critic_input(&w.env.global_state(), &[out0.actions[e], out1.actions[e]]))
            .collect();
        let values = match baseline {
            AdvantageBaseline::Sampled => critic.value(&to_matrix(&rows)?)?,
            AdvantageBaseline::MeanAction => {
                let mut unused = ChaCha8Rng::seed_from_u64(0);
                let m0 = act_batch(&actors[0], &obs[0], ActMode::Mean, &mut unused)?;
                let m1 = act_batch(&actors[1], &obs[1], ActMode::Mean, &mut unused)?;
                let mean_rows: Vec<Vec<f64>> = workers
                    .iter()
                    .enumerate()
                    .map(|(e, w)| critic_input(&w.env.global_state(), &[m0.actions[e], m1.actions[e]]))
                    .collect();
                critic.value(&to_matrix(&mean_rows)?)?
            }
        };
        Ok((obs, [out0, out1], rows, values))
    };

    let (mut obs, mut outs, mut rows, mut values) = decide(workers, rng)?;
    for t in 0..horizon {
        for (e, w) in workers.iter_mut().enumerate() {
            let idx = e * horizon + t;
            for i in 0..2 {
                row_into(&mut batch.obs[i], idx, &obs[i][e]);
                row_into(&mut batch.pre_squash[i], idx, &outs[i].pre_squash[e]);
                row_into(&mut batch.actions[i], idx, &outs[i].actions[e]);
                batch.log_probs[i][idx] = outs[i].log_prob[e];
            }
            row_into(&mut batch.critic_in, idx, &rows[e]);
            batch.values[idx] = values[e];
            let acts = [outs[0].actions[e], outs[1].actions[e]];
            let o = w
                .env
                .step(&acts)
                .map_err(|source| MarlError::Env { index: e, source })?;
            batch.rewards[0][idx] = o.rewards[0];
            batch.rewards[1][idx] = o.rewards[1];
            batch.dones[idx] = o.done;
            w.ep_return += o.rewards[0];
            if let Some(termination) = o.termination {
                batch.episodes.push(EpisodeRecord {
                    env: w.index,
                    seed: w.episode_seed,
                    ret: w.ep_return,
                    len: w.env.t(),
                    termination,
                });
                w.episodes += 1;
                w.start_episode()?;
            }
        }
        // successors of step t: the freshly sampled joint actions at t + 1
        (obs, outs, rows, values) = decide(workers, rng)?;
        for e in 0..n_envs {
            let idx = e * horizon + t;
            row_into(&mut batch.next_critic_in, idx, &rows[e]);
            batch.next_values[idx] = if batch.dones[idx] { 0.0 } else { values[e] };
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvConfig;
    use crate::neural::MlpSpec;
    use crate::scenario::builtin;

    fn setup() -> (Vec<EnvWorker>, [Actor; 2], NetworkParams) {
        let workers = (0..2)
            .map(|i| {
                let env = TransportEnv::new(builtin("corridor").unwrap(), EnvConfig::default()).unwrap();
                EnvWorker::new(env, i, 11).unwrap()
            })
            .collect();
        let spec = MlpSpec { hidden: vec![8], ..MlpSpec::policy(OBS_DIM, ACTION_DIM) };
        let actors = [
            Actor::Learned(NetworkParams::init(&spec, 1).unwrap()),
            Actor::Learned(NetworkParams::init(&spec, 2).unwrap()),
        ];
        let critic = NetworkParams::init(&MlpSpec { hidden: vec![8], ..MlpSpec::value(CRITIC_INPUT_DIM) }, 3).unwrap();
        (workers, actors, critic)
    }

    #[test]
    fn two_envs_four_steps_give_eight_transitions() {
        let (mut w, a, c) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = collect(&mut w, &a, &c, 4, AdvantageBaseline::Sampled, &mut rng).unwrap();
        assert_eq!(b.len(), 8);
        assert_eq!(b.obs[0].dim(), (8, OBS_DIM));
        assert_eq!(b.critic_in.dim(), (8, CRITIC_INPUT_DIM));
    }

    #[test]
    fn same_seeds_same_batch_and_shared_reward() {
        let run = || {
            let (mut w, a, c) = setup();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            collect(&mut w, &a, &c, 6, AdvantageBaseline::MeanAction, &mut rng).unwrap()
        };
        let x = run();
        assert_eq!(x, run());
        assert_eq!(x.rewards[0], x.rewards[1]);
    }

    #[test]
    fn scripted_actor_emits_zero_actions() {
        let (mut w, a, c) = setup();
        let actors = [a[0].clone(), Actor::Scripted];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = collect(&mut w, &actors, &c, 3, AdvantageBaseline::Sampled, &mut rng).unwrap();
        assert!(b.actions[1].iter().all(|v| *v == 0.0));
        assert!(b.actions[0].iter().any(|v| *v != 0.0));
    }
}
