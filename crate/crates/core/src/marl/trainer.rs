use super::rollout::{collect, Actor, EnvWorker};
use super::update::{compute_advantages, critic_update, ppo_update};
use super::{derive_seed, LrSchedule, MarlError, TrainConfig};
use crate::env::{EnvSnapshot, Termination, TransportEnv};
use crate::mdp::{ACTION_DIM, CRITIC_INPUT_DIM, OBS_DIM};
use crate::neural::{
    cosine_lr, decode_f64s, encode_f64s, save_checkpoint, Head, MlpSpec, NetworkParams,
    OptimizerState,
};
use crate::scenario::{load_scenario, Scenario};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const STATE_FORMAT: &str = "trainer_state_v1";

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub step: u64,
    pub update: u64,
    /// Mean undiscounted return of episodes finished during the update.
    pub return_mean: Option<f64>,
    pub sr: Option<f64>,
    pub episodes: usize,
    pub clip_frac: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub value_loss: f64,
    pub lr: f64,
    /// Seconds since training started, including time before a resume.
    pub wallclock: f64,
}

/// Output directory of a training run.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, MarlError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn final_dir(&self) -> PathBuf {
        self.root.join("final")
    }

    pub fn checkpoint_dir(&self, update: u64) -> PathBuf {
        self.root.join("ckpt").join(format!("update_{update:06}"))
    }

    pub fn append_metrics(&self, m: &UpdateMetrics) -> Result<(), MarlError> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.metrics_path())?;
        writeln!(f, "{}", serde_json::to_string(m)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WorkerState {
    index: usize,
    episodes: u64,
    episode_seed: u64,
    ep_return: f64,
    snapshot: EnvSnapshot,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateHeader {
    format: String,
    config: TrainConfig,
    scenario: Scenario,
    step: u64,
    update: u64,
    elapsed: f64,
    learned: [bool; 2],
    policy_opt_t: [u64; 2],
    critic_opt_t: u64,
    workers: Vec<WorkerState>,
    /// Lengths of the consecutive sections of `state.bin`.
    sections: Vec<usize>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub scenario: Scenario,
    pub workers: Vec<EnvWorker>,
    /// `None` for an agent that runs the scripted policy.
    pub policies: [Option<NetworkParams>; 2],
    pub critic: NetworkParams,
    pub policy_opt: [Option<OptimizerState>; 2],
    pub critic_opt: OptimizerState,
    pub step: u64,
    pub update: u64,
    elapsed_before: f64,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, MarlError> {
        let scenario = load_scenario(&cfg.scenario)?;
        Self::with_scenario(cfg, scenario)
    }

    pub fn with_scenario(cfg: TrainConfig, scenario: Scenario) -> Result<Self, MarlError> {
        cfg.validate()?;
        let workers = (0..cfg.n_envs)
            .map(|i| {
                let env = TransportEnv::new(scenario.clone(), cfg.env.clone())
                    .map_err(|source| MarlError::Env { index: i, source })?;
                EnvWorker::new(env, i, derive_seed(&[cfg.seed, 0xe5]))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let policy_spec = MlpSpec {
            input_dim: OBS_DIM,
            hidden: cfg.hidden.clone(),
            output_dim: ACTION_DIM,
            head: Head::GaussianPolicy { log_std_init: cfg.log_std_init },
            output_gain: cfg.policy_output_gain,
        };
        let critic_spec = MlpSpec {
            hidden: cfg.hidden.clone(),
            ..MlpSpec::value(CRITIC_INPUT_DIM)
        };
        let mut policies = [None, None];
        let mut policy_opt = [None, None];
        for i in 0..2 {
            if i == 1 && cfg.scripted_partner {
                continue;
            }
            let p = NetworkParams::init(&policy_spec, derive_seed(&[cfg.seed, 0xa0, i as u64]))?;
            policy_opt[i] = Some(OptimizerState::new(p.num_params()));
            policies[i] = Some(p);
        }
        let critic = NetworkParams::init(&critic_spec, derive_seed(&[cfg.seed, 0xc0]))?;
        let critic_opt = OptimizerState::new(critic.num_params());
        Ok(Self {
            cfg,
            scenario,
            workers,
            policies,
            critic,
            policy_opt,
            critic_opt,
            step: 0,
            update: 0,
            elapsed_before: 0.0,
            started: Instant::now(),
        })
    }

    pub fn actors(&self) -> [Actor; 2] {
        [0, 1].map(|i| match &self.policies[i] {
            Some(p) => Actor::Learned(p.clone()),
            None => Actor::Scripted,
        })
    }

    pub fn wallclock(&self) -> f64 {
        self.elapsed_before + self.started.elapsed().as_secs_f64()
    }

    pub fn current_lr(&self) -> f64 {
        match self.cfg.schedule {
            LrSchedule::Cosine => cosine_lr(self.step, self.cfg.total_steps, self.cfg.lr),
            LrSchedule::Constant => self.cfg.lr,
        }
    }

    pub fn budget_left(&self) -> bool {
        self.step < self.cfg.total_steps
    }

    /// Collect, advantages, per-agent surrogate updates, critic update.
    pub fn update_once(&mut self) -> Result<UpdateMetrics, MarlError> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.cfg.seed, 0x0d, self.update]));
        let lr = self.current_lr();
        let actors = self.actors();
        let mut batch = collect(
            &mut self.workers,
            &actors,
            &self.critic,
            self.cfg.horizon,
            self.cfg.advantage_baseline,
            &mut rng,
        )?;
        compute_advantages(&mut batch, self.cfg.gamma, self.cfg.lambda, self.cfg.normalize_advantages);

        let mut stats = Vec::new();
        for i in 0..2 {
            if let (Some(p), Some(opt)) = (&mut self.policies[i], &mut self.policy_opt[i]) {
                stats.push(ppo_update(p, opt, &batch, i, &self.cfg, lr, self.update, &mut rng)?);
            }
        }
        let value_loss = critic_update(
            &mut self.critic,
            &mut self.critic_opt,
            &batch,
            &self.cfg,
            lr,
            self.update,
            &mut rng,
        )?;

        self.step += batch.len() as u64;
        self.update += 1;
        let n = stats.len().max(1) as f64;
        let eps = &batch.episodes;
        let (return_mean, sr) = if eps.is_empty() {
            (None, None)
        } else {
            let k = eps.len() as f64;
            let goals = eps.iter().filter(|e| e.termination == Termination::Goal).count();
            (Some(eps.iter().map(|e| e.ret).sum::<f64>() / k), Some(goals as f64 / k))
        };
        Ok(UpdateMetrics {
            step: self.step,
            update: self.update,
            return_mean,
            sr,
            episodes: eps.len(),
            clip_frac: stats.iter().map(|s| s.clip_frac).sum::<f64>() / n,
            entropy: stats.iter().map(|s| s.entropy).sum::<f64>() / n,
            approx_kl: stats.iter().map(|s| s.approx_kl).sum::<f64>() / n,
            value_loss,
            lr,
            wallclock: self.wallclock(),
        })
    }

    /// Trains until the step budget is spent or `stop` returns true. Metrics
    /// and periodic checkpoints go to `run` when given; on error a final
    /// checkpoint is still written.
    pub fn run(
        &mut self,
        run: Option<&RunDir>,
        mut stop: impl FnMut(&Trainer, &UpdateMetrics) -> bool,
    ) -> Result<Vec<UpdateMetrics>, MarlError> {
        let mut log = Vec::new();
        while self.budget_left() {
            let m = match self.update_once() {
                Ok(m) => m,
                Err(e) => {
                    if let Some(r) = run {
                        if let Err(save) = self.save(&r.final_dir()) {
                            log::error!("final checkpoint failed: {save}");
                        }
                    }
                    return Err(e);
                }
            };
            log::info!(
                "update {} step {} return {:?} sr {:?} lr {:.3e}",
                m.update, m.step, m.return_mean, m.sr, m.lr
            );
            if let Some(r) = run {
                r.append_metrics(&m)?;
                if self.cfg.checkpoint_every > 0 && self.update % self.cfg.checkpoint_every == 0 {
                    self.save(&r.checkpoint_dir(self.update))?;
                }
            }
            let halt = stop(self, &m);
            log.push(m);
            if halt {
                break;
            }
        }
        if let Some(r) = run {
            self.save(&r.final_dir())?;
        }
        Ok(log)
    }

    /// Writes `agent{i}.ckpt`, `critic.ckpt` and the exact-resume sidecar
    /// (`state.json` + `state.bin`) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), MarlError> {
        fs::create_dir_all(dir)?;
        for (i, p) in self.policies.iter().enumerate() {
            if let Some(p) = p {
                save_checkpoint(&dir.join(format!("agent{i}.ckpt")), p, self.cfg.seed, self.step)?;
            }
        }
        save_checkpoint(&dir.join("critic.ckpt"), &self.critic, self.cfg.seed, self.step)?;

        let mut sections: Vec<Vec<f64>> = Vec::new();
        for (p, o) in self.policies.iter().zip(&self.policy_opt) {
            if let (Some(p), Some(o)) = (p, o) {
                sections.extend([p.to_flat(), o.m.clone(), o.v.clone()]);
            }
        }
        sections.extend([self.critic.to_flat(), self.critic_opt.m.clone(), self.critic_opt.v.clone()]);
        let header = StateHeader {
            format: STATE_FORMAT.into(),
            config: self.cfg.clone(),
            scenario: self.scenario.clone(),
            step: self.step,
            update: self.update,
            elapsed: self.wallclock(),
            learned: [self.policies[0].is_some(), self.policies[1].is_some()],
            policy_opt_t: [0, 1].map(|i| self.policy_opt[i].as_ref().map_or(0, |o| o.t)),
            critic_opt_t: self.critic_opt.t,
            workers: self
                .workers
                .iter()
                .map(|w| WorkerState {
                    index: w.index,
                    episodes: w.episodes,
                    episode_seed: w.episode_seed,
                    ep_return: w.ep_return,
                    snapshot: w.env.snapshot(),
                })
                .collect(),
            sections: sections.iter().map(Vec::len).collect(),
        };
        fs::write(dir.join("state.json"), serde_json::to_string(&header)?)?;
        let flat: Vec<f64> = sections.into_iter().flatten().collect();
        fs::write(dir.join("state.bin"), encode_f64s(&flat))?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.cfg)?)?;
        Ok(())
    }

    /// Restores a trainer saved by [`Trainer::save`] bit-exactly.
    pub fn resume(dir: &Path) -> Result<Self, MarlError> {
        let header: StateHeader = serde_json::from_str(&fs::read_to_string(dir.join("state.json"))?)?;
        if header.format != STATE_FORMAT {
            return Err(MarlError::Config(format!("unknown trainer state format {}", header.format)));
        }
        let mut t = Self::with_scenario(header.config.clone(), header.scenario.clone())?;
        if [t.policies[0].is_some(), t.policies[1].is_some()] != header.learned {
            return Err(MarlError::Config("learner layout does not match config".into()));
        }
        let flat = decode_f64s(&fs::read(dir.join("state.bin"))?)?;
        if flat.len() != header.sections.iter().sum::<usize>() {
            return Err(MarlError::Config("state.bin length does not match state.json".into()));
        }
        let mut chunks = Vec::new();
        let mut off = 0;
        for len in &header.sections {
            chunks.push(flat[off..off + len].to_vec());
            off += len;
        }
        let mut chunks = chunks.into_iter();
        let mut next = || chunks.next().ok_or_else(|| MarlError::Config("missing state section".into()));
        for i in 0..2 {
            if let (Some(p), Some(o)) = (&mut t.policies[i], &mut t.policy_opt[i]) {
                p.set_flat(&next()?)?;
                o.m = next()?;
                o.v = next()?;
                o.t = header.policy_opt_t[i];
            }
        }
        t.critic.set_flat(&next()?)?;
        t.critic_opt.m = next()?;
        t.critic_opt.v = next()?;
        t.critic_opt.t = header.critic_opt_t;
        if header.workers.len() != t.workers.len() {
            return Err(MarlError::Config("worker count does not match config".into()));
        }
        for (w, s) in t.workers.iter_mut().zip(header.workers) {
            w.episodes = s.episodes;
            w.episode_seed = s.episode_seed;
            w.ep_return = s.ep_return;
            w.env.restore(s.snapshot);
        }
        t.step = header.step;
        t.update = header.update;
        t.elapsed_before = header.elapsed;
        t.started = Instant::now();
        Ok(t)
    }
}

/// Trains both agents and writes config, metrics and checkpoints to `out`.
pub fn train(cfg: TrainConfig, out: &Path) -> Result<Trainer, MarlError> {
    let run = RunDir::create(out)?;
    fs::write(run.root.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let mut t = Trainer::new(cfg)?;
    t.run(Some(&run), |_, _| false)?;
    Ok(t)
}

/// Robot learns; the partner runs the scripted policy throughout.
pub fn train_single_agent(mut cfg: TrainConfig, out: &Path) -> Result<Trainer, MarlError> {
    cfg.scripted_partner = true;
    train(cfg, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            n_envs: 2,
            horizon: 8,
            total_steps: 48,
            epochs: 2,
            minibatch: 8,
            hidden: vec![16, 16],
            checkpoint_every: 0,
            ..Default::default()
        }
    }

    fn strip(m: &UpdateMetrics) -> UpdateMetrics {
        UpdateMetrics { wallclock: 0.0, ..m.clone() }
    }

    #[test]
    fn budget_is_respected_within_one_batch() {
        let mut t = Trainer::new(tiny()).unwrap();
        let log = t.run(None, |_, _| false).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(t.step, 48);
    }

    #[test]
    fn resume_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Trainer::new(tiny()).unwrap();
        a.update_once().unwrap();
        a.save(dir.path()).unwrap();
        let mut b = Trainer::resume(dir.path()).unwrap();
        assert_eq!(b.policies, a.policies);
        assert_eq!(b.critic, a.critic);
        assert_eq!(b.policy_opt, a.policy_opt);
        assert_eq!(b.step, a.step);
        let ma = a.update_once().unwrap();
        let mb = b.update_once().unwrap();
        assert_eq!(strip(&ma), strip(&mb));
        assert_eq!(a.policies, b.policies);
    }

    #[test]
    fn scripted_partner_has_no_params_and_stays_put() {
        let cfg = TrainConfig { scripted_partner: true, ..tiny() };
        let mut t = Trainer::new(cfg).unwrap();
        assert!(t.policies[1].is_none());
        let before = t.policies[0].clone();
        t.update_once().unwrap();
        assert!(t.policies[1].is_none());
        assert_ne!(t.policies[0], before);
    }
}
