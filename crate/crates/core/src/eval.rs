//! Episode metrics (success, completion time Γ, tilt rate α̇), seeded suites
//! over scenarios with the scripted baseline, and the three-way ablation.

use crate::env::{EnvConfig, EnvError, Termination, TransportEnv};
use crate::marl::{act_batch, derive_seed, Actor, MarlError};
use crate::mdp::{lateral_deviation, ACTION_DIM, OBS_DIM};
use crate::neural::{load_checkpoint, ActMode, NeuralError};
use crate::replay::{ReplayError, ReplayWriter};
use crate::scenario::{load_scenario, Category, Scenario, ScenarioError, TaskMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Marl(#[from] MarlError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("checkpoint expects {got}-dim observations, scenario provides {expected}")]
    ObsDim { expected: usize, got: usize },
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub seed: u64,
    pub success: bool,
    pub drop: bool,
    pub timeout: bool,
    /// Seconds to reach the goal; absent on failure.
    pub gamma_time: Option<f64>,
    /// Mean |Δ tilt| / Δt in deg/s over policy steps; absent for push tasks.
    pub tilt_rate: Option<f64>,
    pub path_deviation_max: f64,
    pub steps: usize,
    pub ret: f64,
    /// True when every observed task block was zero.
    pub task_block_zero: bool,
}

/// Accumulates per-step quantities into [`EpisodeMetrics`].
#[derive(Debug, Clone)]
pub struct MetricsTracker {
    seed: u64,
    carry: bool,
    half: (f64, f64),
    dt: f64,
    last_tilt: f64,
    tilt_sum: f64,
    dev_max: f64,
    ret: f64,
    steps: usize,
    task_zero: bool,
    termination: Option<Termination>,
}

impl MetricsTracker {
    pub fn new(env: &TransportEnv, seed: u64) -> Self {
        let sc = env.scenario();
        let half = (sc.object.half_x, sc.object.half_y);
        let mut t = Self {
            seed,
            carry: sc.task_mode == TaskMode::Carry,
            half,
            dt: env.sim.cfg.dt_low(),
            last_tilt: env.state().object.tilt_angle(half.0, half.1),
            tilt_sum: 0.0,
            dev_max: 0.0,
            ret: 0.0,
            steps: 0,
            task_zero: true,
            termination: None,
        };
        t.observe(env);
        t
    }

    fn observe(&mut self, env: &TransportEnv) {
        let p = env.state().object.position();
        let origin = env.tracker().origin;
        let dev = match env.anchors() {
            Some(a) => lateral_deviation(p, origin, &a.anchors),
            None => lateral_deviation(p, origin, &[env.scenario().goal.center]),
        };
        self.dev_max = self.dev_max.max(dev);
        self.task_zero &= env.frames().iter().all(|f| f.task.iter().all(|v| *v == 0.0));
    }

    /// Records the step just taken by `env`.
    pub fn record(&mut self, env: &TransportEnv, reward: f64, termination: Option<Termination>) {
        let tilt = env.state().object.tilt_angle(self.half.0, self.half.1);
        self.tilt_sum += (tilt - self.last_tilt).abs().to_degrees() / self.dt;
        self.last_tilt = tilt;
        self.ret += reward;
        self.steps += 1;
        self.termination = termination;
        self.observe(env);
    }

    pub fn finish(&self) -> Result<EpisodeMetrics, EvalError> {
        let term = self
            .termination
            .ok_or_else(|| EvalError::Config("episode has not ended".into()))?;
        let success = term == Termination::Goal;
        Ok(EpisodeMetrics {
            seed: self.seed,
            success,
            drop: term == Termination::Drop,
            timeout: term == Termination::Timeout,
            gamma_time: success.then(|| self.steps as f64 * self.dt),
            tilt_rate: self.carry.then(|| self.tilt_sum / self.steps.max(1) as f64),
            path_deviation_max: self.dev_max,
            steps: self.steps,
            ret: self.ret,
            task_block_zero: self.task_zero,
        })
    }
}

/// Runs one episode. Learned actors act on their mean action unless `mode`
/// says otherwise; sampling draws from a generator seeded by `seed`.
pub fn run_episode(
    env: &mut TransportEnv,
    actors: &[Actor; 2],
    seed: u64,
    mode: ActMode,
    mut recorder: Option<&mut ReplayWriter>,
) -> Result<EpisodeMetrics, EvalError> {
    for a in actors {
        if let Some(p) = a.params() {
            if p.spec.input_dim != OBS_DIM || p.spec.output_dim != ACTION_DIM {
                return Err(EvalError::ObsDim { expected: OBS_DIM, got: p.spec.input_dim });
            }
        }
    }
    env.reset(seed)?;
    if let Some(r) = recorder.as_deref_mut() {
        r.begin(env, seed)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xe7a1]));
    let mut tracker = MetricsTracker::new(env, seed);
    while !env.is_done() {
        let obs = env.observations();
        let a0 = act_batch(&actors[0], &obs[0..1], mode, &mut rng)?.actions[0];
        let a1 = act_batch(&actors[1], &obs[1..2], mode, &mut rng)?.actions[0];
        let actions = [a0, a1];
        let prev = env.state().clone();
        let out = env.step(&actions)?;
        if let Some(r) = recorder.as_deref_mut() {
            r.step(&prev, &actions, &out, env)?;
        }
        tracker.record(env, out.rewards[0], out.termination);
    }
    tracker.finish()
}

/// Loads `agent0.ckpt` / `agent1.ckpt` from a checkpoint directory; a
/// missing file means that agent runs the scripted policy.
pub fn load_actors(dir: &Path) -> Result<[Actor; 2], EvalError> {
    let mut out = [Actor::Scripted, Actor::Scripted];
    let mut found = false;
    for (i, slot) in out.iter_mut().enumerate() {
        let path = dir.join(format!("agent{i}.ckpt"));
        if path.exists() {
            let (p, _) = load_checkpoint(&path)?;
            if p.spec.input_dim != OBS_DIM || p.spec.output_dim != ACTION_DIM {
                return Err(EvalError::ObsDim { expected: OBS_DIM, got: p.spec.input_dim });
            }
            *slot = Actor::Learned(p);
            found = true;
        }
    }
    if !found {
        return Err(EvalError::Config(format!("no agent checkpoints in {}", dir.display())));
    }
    Ok(out)
}

/// Seed of episode `k` in evaluation seed group `g`; identical across
/// variants so comparisons are paired.
pub fn episode_seed(base: u64, group: usize, k: usize) -> u64 {
    derive_seed(&[base, 0xe0, group as u64, k as u64])
}

/// Order-independent mean: values are summed in sorted order.
fn sorted_mean(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.iter().sum::<f64>() / s.len().max(1) as f64
}

fn sorted_std(v: &[f64]) -> f64 {
    let m = sorted_mean(v);
    let d: Vec<f64> = v.iter().map(|x| (x - m) * (x - m)).collect();
    sorted_mean(&d).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub base_seed: u64,
    /// Seed groups; SR mean and std are taken across groups.
    pub n_seeds: usize,
    pub episodes_per_seed: usize,
    pub env: EnvConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            base_seed: 1000,
            n_seeds: 5,
            episodes_per_seed: 20,
            env: EnvConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub id: String,
    /// Success rate in percent, mean and std over seed groups.
    pub sr_mean: f64,
    pub sr_std: f64,
    pub sr_per_seed: Vec<f64>,
    pub gamma_mean: Option<f64>,
    pub tilt_rate_mean: Option<f64>,
    pub drop_rate: f64,
    pub episodes: usize,
}

/// Evaluates `actors` on one scenario over every seed group.
pub fn evaluate_cell(
    id: &str,
    scenario: &Scenario,
    actors: &[Actor; 2],
    cfg: &EvalConfig,
) -> Result<(CellReport, Vec<EpisodeMetrics>), EvalError> {
    let mut env = TransportEnv::new(scenario.clone(), cfg.env.clone())?;
    let mut all = Vec::new();
    let mut per_seed = Vec::new();
    for g in 0..cfg.n_seeds {
        let mut wins = 0;
        for k in 0..cfg.episodes_per_seed {
            let m = run_episode(&mut env, actors, episode_seed(cfg.base_seed, g, k), ActMode::Mean, None)?;
            wins += m.success as usize;
            all.push(m);
        }
        per_seed.push(100.0 * wins as f64 / cfg.episodes_per_seed.max(1) as f64);
    }
    let gammas: Vec<f64> = all.iter().filter_map(|m| m.gamma_time).collect();
    let tilts: Vec<f64> = all.iter().filter_map(|m| m.tilt_rate).collect();
    let n = all.len();
    Ok((
        CellReport {
            id: id.to_string(),
            sr_mean: sorted_mean(&per_seed),
            sr_std: sorted_std(&per_seed),
            sr_per_seed: per_seed,
            gamma_mean: (!gammas.is_empty()).then(|| sorted_mean(&gammas)),
            tilt_rate_mean: (!tilts.is_empty()).then(|| sorted_mean(&tilts)),
            drop_rate: all.iter().filter(|m| m.drop).count() as f64 / n.max(1) as f64,
            episodes: n,
        },
        all,
    ))
}

/// `(learned - script) / script`; undefined when the baseline never succeeds.
pub fn relative_gain(learned: f64, script: f64) -> Option<f64> {
    (script > 0.0).then(|| (learned - script) / script)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    pub sr_mean: f64,
    pub baseline_sr_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub header: String,
    pub n_seeds: usize,
    pub episodes_per_seed: usize,
    pub learned: Vec<CellReport>,
    pub baseline: Vec<CellReport>,
    /// Relative SR gain over the scripted baseline per scenario.
    pub delta: Vec<Option<f64>>,
    pub categories: Vec<CategoryReport>,
}

/// Evaluates `actors` and the scripted baseline on each scenario with the
/// same episode seeds.
pub fn run_suite(ids: &[String], actors: &[Actor; 2], cfg: &EvalConfig) -> Result<SuiteReport, EvalError> {
    if cfg.n_seeds < 5 {
        return Err(EvalError::Config("a suite needs at least 5 seed groups".into()));
    }
    let scripted = [Actor::Scripted, Actor::Scripted];
    let mut learned = Vec::new();
    let mut baseline = Vec::new();
    for id in ids {
        let sc = load_scenario(id)?;
        learned.push(evaluate_cell(id, &sc, actors, cfg)?.0);
        baseline.push(evaluate_cell(id, &sc, &scripted, cfg)?.0);
    }
    let delta = learned
        .iter()
        .zip(&baseline)
        .map(|(l, b)| relative_gain(l.sr_mean, b.sr_mean))
        .collect();
    let mut categories = Vec::new();
    for cat in [Category::Osp, Category::Sct, Category::Slh] {
        let rows: Vec<usize> = ids
            .iter()
            .enumerate()
            .filter(|(_, id)| Category::of(id) == Some(cat))
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let l: Vec<f64> = rows.iter().map(|&i| learned[i].sr_mean).collect();
        let b: Vec<f64> = rows.iter().map(|&i| baseline[i].sr_mean).collect();
        categories.push(CategoryReport {
            category: cat.label().to_string(),
            sr_mean: sorted_mean(&l),
            baseline_sr_mean: sorted_mean(&b),
        });
    }
    Ok(SuiteReport {
        header: format!(
            "{} seed groups x {} evaluation episodes per cell, mean actions",
            cfg.n_seeds, cfg.episodes_per_seed
        ),
        n_seeds: cfg.n_seeds,
        episodes_per_seed: cfg.episodes_per_seed,
        learned,
        baseline,
        delta,
        categories,
    })
}

/// Text table: one row per scenario with SR mean ± std and Δ.
pub fn render_suite(r: &SuiteReport) -> String {
    let mut s = format!("# {}\n", r.header);
    s.push_str(&format!("{:<10} {:>16} {:>16} {:>9}\n", "scenario", "SR learned", "SR script", "delta"));
    for ((l, b), d) in r.learned.iter().zip(&r.baseline).zip(&r.delta) {
        let d = d.map_or("--".to_string(), |d| format!("{:+.1}%", 100.0 * d));
        s.push_str(&format!(
            "{:<10} {:>7.1} ± {:<6.1} {:>7.1} ± {:<6.1} {:>9}\n",
            l.id, l.sr_mean, l.sr_std, b.sr_mean, b.sr_std, d
        ));
    }
    for c in &r.categories {
        s.push_str(&format!("{:<10} {:>16.1} {:>16.1}\n", c.category, c.sr_mean, c.baseline_sr_mean));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No anchors: zero task block, nominal controller holds position.
    NoCognition,
    /// Anchors present, residual forced to zero.
    NoSkill,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub cell: CellReport,
    pub task_block_zero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub scenario: String,
    pub variants: Vec<VariantReport>,
}

/// Runs the requested variants with paired seeds. `full` are the trained
/// actors; `no_cognition` defaults to the same actors without anchors.
pub fn ablate(
    id: &str,
    variants: &[Variant],
    full: &[Actor; 2],
    no_cognition: Option<&[Actor; 2]>,
    cfg: &EvalConfig,
) -> Result<AblationReport, EvalError> {
    let sc = load_scenario(id)?;
    let mut out = Vec::new();
    for &v in variants {
        let mut c = cfg.clone();
        let actors = match v {
            Variant::Full => full.clone(),
            Variant::NoSkill => [Actor::Scripted, Actor::Scripted],
            Variant::NoCognition => {
                c.env.use_cognition = false;
                no_cognition.unwrap_or(full).clone()
            }
        };
        let (cell, eps) = evaluate_cell(id, &sc, &actors, &c)?;
        out.push(VariantReport {
            variant: v,
            cell,
            task_block_zero: eps.iter().all(|m| m.task_block_zero),
        });
    }
    Ok(AblationReport { scenario: id.to_string(), variants: out })
}
