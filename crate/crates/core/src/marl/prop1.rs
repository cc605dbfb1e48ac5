//! Value-target drift on a one-state two-agent game with a fixed joint-action
//! table `Q(a_i, a_j)` while only the partner's action distribution moves.

use super::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGame {
    /// `q[a_i][a_j]`.
    pub q: Vec<Vec<f64>>,
}

impl ToyGame {
    pub fn random(seed: u64, n_own: usize, n_partner: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            q: (0..n_own)
                .map(|_| (0..n_partner).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        }
    }

    /// Joint-action target: the table entry of the realized pair.
    pub fn joint_target(&self, a_i: usize, a_j: usize) -> f64 {
        self.q[a_i][a_j]
    }

    /// Marginalized target `sum_j P(j) Q(a_i, j)`.
    pub fn marginal_target(&self, a_i: usize, partner: &[f64]) -> f64 {
        self.q[a_i].iter().zip(partner).map(|(q, p)| q * p).sum()
    }
}

/// Partner distributions: softmax of logits that take one Gaussian step of
/// size `scale` per entry.
pub fn drift_schedule(seed: u64, n_partner: usize, steps: usize, scale: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logits: Vec<f64> = (0..n_partner).map(|_| rng.sample(StandardNormal)).collect();
    let softmax = |l: &[f64]| {
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    let mut out = vec![softmax(&logits)];
    for _ in 0..steps {
        for l in logits.iter_mut() {
            *l += scale * rng.sample::<f64, _>(StandardNormal);
        }
        out.push(softmax(&logits));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftStep {
    pub step: usize,
    /// Largest `|target_{k+1} - target_k|` of the joint-action critic over all
    /// realized action pairs.
    pub joint_drift: f64,
    /// `M_{k+1}(a_i) - M_k(a_i)` per own action.
    pub marginal_drift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub steps: Vec<DriftStep>,
    pub max_joint_drift: f64,
    pub max_marginal_drift: f64,
}

/// Target changes of both critic forms along a partner-distribution schedule.
pub fn prop1_diagnostic(game: &ToyGame, schedule: &[Vec<f64>]) -> Prop1Report {
    let n_own = game.q.len();
    let n_partner = game.q.first().map_or(0, Vec::len);
    let mut steps = Vec::new();
    for (k, w) in schedule.windows(2).enumerate() {
        let mut joint = 0.0f64;
        for a in 0..n_own {
            for b in 0..n_partner {
                // the joint critic's target does not read the partner distribution
                let before = game.joint_target(a, b);
                let after = game.joint_target(a, b);
                joint = joint.max((after - before).abs());
            }
        }
        let marginal_drift = (0..n_own)
            .map(|a| game.marginal_target(a, &w[1]) - game.marginal_target(a, &w[0]))
            .collect();
        steps.push(DriftStep { step: k, joint_drift: joint, marginal_drift });
    }
    Prop1Report {
        max_joint_drift: steps.iter().map(|s| s.joint_drift).fold(0.0, f64::max),
        max_marginal_drift: steps
            .iter()
            .flat_map(|s| s.marginal_drift.iter().map(|d| d.abs()))
            .fold(0.0, f64::max),
        steps,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Prop1Config {
    pub seed: u64,
    pub n_own: usize,
    pub n_partner: usize,
    pub steps: usize,
    pub scale: f64,
}

impl Default for Prop1Config {
    fn default() -> Self {
        Self {
            seed: 0,
            n_own: 4,
            n_partner: 5,
            steps: 100,
            scale: 0.3,
        }
    }
}

impl Prop1Config {
    pub fn game(&self) -> ToyGame {
        ToyGame::random(derive_seed(&[self.seed, 1]), self.n_own, self.n_partner)
    }

    pub fn schedule(&self) -> Vec<Vec<f64>> {
        drift_schedule(derive_seed(&[self.seed, 2]), self.n_partner, self.steps, self.scale)
    }

    pub fn run(&self) -> Prop1Report {
        prop1_diagnostic(&self.game(), &self.schedule())
    }
}
