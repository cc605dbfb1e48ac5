//! Central finite differences against backprop for the clipped surrogate and
//! the critic TD loss on full-size networks.

use super::derive_seed;
use super::loss::{critic_loss, ppo_loss, ppo_loss_grad, td_targets, critic_loss_grad, PolicyMinibatch};
use super::MarlError;
use crate::mdp::{ACTION_DIM, CRITIC_INPUT_DIM, OBS_DIM};
use crate::neural::gradcheck::{central_difference, relative_error};
use crate::neural::{gaussian_log_prob, MlpSpec, NetworkParams, Tape};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradOracleConfig {
    pub seed: u64,
    pub instances: usize,
    pub batch: usize,
    pub h: f64,
    /// Random unit directions per loss and instance.
    pub random_dirs: usize,
    /// Coordinate directions of the largest gradient entries.
    pub top_coords: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub gamma: f64,
}

impl Default for GradOracleConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 100,
            batch: 4,
            h: 1e-5,
            random_dirs: 4,
            top_coords: 4,
            floor: 1e-7,
            clip_eps: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            gamma: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradOracleReport {
    pub max_rel_err: f64,
    pub max_rel_err_policy: f64,
    pub max_rel_err_critic: f64,
    pub checks: usize,
    /// Directions dropped because the perturbation crossed a ReLU kink or a
    /// clip/min switch, where the loss is not differentiable.
    pub skipped: usize,
    pub elapsed_s: f64,
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn relu_signs(p: &NetworkParams, x: &Array2<f64>) -> Vec<bool> {
    let last = p.weights.len() - 1;
    let mut h = x.clone();
    let mut out = Vec::new();
    for (l, (w, b)) in p.weights.iter().zip(&p.biases).enumerate() {
        h = h.dot(w) + b;
        if l < last {
            out.extend(h.iter().map(|v| *v > 0.0));
            h.mapv_inplace(|v| v.max(0.0));
        }
    }
    out
}

/// Which piece of the clipped surrogate each sample sits on.
fn surrogate_branches(p: &NetworkParams, mb: &PolicyMinibatch, eps: f64) -> Vec<u8> {
    let mean = p.forward(&mb.obs).expect("forward");
    let ls: Vec<f64> = p.log_std.as_ref().expect("policy").iter().copied().collect();
    (0..mb.obs.nrows())
        .map(|r| {
            let u = mb.pre_squash.row(r).to_vec();
            let lp = gaussian_log_prob(&u, &mean.row(r).to_vec(), &ls);
            let ratio = (lp - mb.old_log_prob[r]).exp();
            let a = mb.advantages[r];
            let band = if ratio < 1.0 - eps {
                0
            } else if ratio > 1.0 + eps {
                2
            } else {
                1
            };
            let unclipped_smaller = ratio * a <= ratio.clamp(1.0 - eps, 1.0 + eps) * a;
            band * 2 + unclipped_smaller as u8
        })
        .collect()
}

fn with_flat(base: &NetworkParams, flat: &[f64]) -> NetworkParams {
    let mut p = base.clone();
    p.set_flat(flat).expect("flat length");
    p
}

fn shifted(x: &[f64], d: &[f64], h: f64) -> Vec<f64> {
    x.iter().zip(d).map(|(x, d)| x + h * d).collect()
}

fn directions(grad: &[f64], cfg: &GradOracleConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = grad.len();
    let mut dirs = Vec::new();
    for _ in 0..cfg.random_dirs {
        let mut d: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.iter_mut().for_each(|v| *v /= norm);
        dirs.push(d);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
    for &k in order.iter().take(cfg.top_coords) {
        let mut d = vec![0.0; n];
        d[k] = 1.0;
        dirs.push(d);
    }
    dirs
}

struct Tally {
    max: f64,
    checks: usize,
    skipped: usize,
}

fn check_loss(
    flat: &[f64],
    grad: &[f64],
    dirs: Vec<Vec<f64>>,
    h: f64,
    floor: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
    mut signature: impl FnMut(&[f64]) -> Vec<u8>,
    tally: &mut Tally,
) {
    for d in dirs {
        let plus = signature(&shifted(flat, &d, h));
        let minus = signature(&shifted(flat, &d, -h));
        if plus != minus {
            tally.skipped += 1;
            continue;
        }
        let analytic: f64 = grad.iter().zip(&d).map(|(g, d)| g * d).sum();
        let numeric = central_difference(&mut loss, flat, &d, h);
        tally.max = tally.max.max(relative_error(analytic, numeric, floor));
        tally.checks += 1;
    }
}

/// Runs the finite-difference comparison on `cfg.instances` random instances
/// of each loss.
pub fn grad_oracle(cfg: &GradOracleConfig) -> Result<GradOracleReport, MarlError> {
    let start = Instant::now();
    let mut pol = Tally { max: 0.0, checks: 0, skipped: 0 };
    let mut cri = Tally { max: 0.0, checks: 0, skipped: 0 };
    for inst in 0..cfg.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, inst as u64]));

        // clipped surrogate with entropy bonus
        let mut p = NetworkParams::init(&MlpSpec::policy(OBS_DIM, ACTION_DIM), rng.random())?;
        if let Some(ls) = &mut p.log_std {
            ls.mapv_inplace(|_| rng.random_range(-1.0..0.0));
        }
        let obs = normal_matrix(cfg.batch, OBS_DIM, &mut rng);
        let mean = p.forward(&obs)?;
        let ls: Vec<f64> = p.log_std.as_ref().map(|l| l.iter().copied().collect()).unwrap_or_default();
        let noise = normal_matrix(cfg.batch, ACTION_DIM, &mut rng);
        let std = Array2::from_shape_fn((1, ACTION_DIM), |(_, j)| ls[j].exp());
        let u = &mean + &(noise * &std);
        let old_log_prob = (0..cfg.batch)
            .map(|r| {
                gaussian_log_prob(&u.row(r).to_vec(), &mean.row(r).to_vec(), &ls)
                    + rng.random_range(-0.4..0.4)
            })
            .collect();
        let advantages = (0..cfg.batch).map(|_| rng.sample(StandardNormal)).collect();
        let mb = PolicyMinibatch { obs, pre_squash: u, old_log_prob, advantages };
        let (_, grad, _) = ppo_loss_grad(&p, &mb, cfg.clip_eps, cfg.entropy_coef)?;
        let flat = p.to_flat();
        let dirs = directions(&grad, cfg, &mut rng);
        check_loss(
            &flat,
            &grad,
            dirs,
            cfg.h,
            cfg.floor,
            |x| {
                let q = with_flat(&p, x);
                let mut tape = Tape::new();
                let (l, _, _) = ppo_loss(&mut tape, &q, &mb, cfg.clip_eps, cfg.entropy_coef).expect("loss");
                tape.scalar(l)
            },
            |x| {
                let q = with_flat(&p, x);
                let mut s: Vec<u8> = relu_signs(&q, &mb.obs).into_iter().map(u8::from).collect();
                s.extend(surrogate_branches(&q, &mb, cfg.clip_eps));
                s
            },
            &mut pol,
        );

        // critic TD loss with detached targets
        let c = NetworkParams::init(&MlpSpec::value(CRITIC_INPUT_DIM), rng.random())?;
        let x = normal_matrix(cfg.batch, CRITIC_INPUT_DIM, &mut rng);
        let nx = normal_matrix(cfg.batch, CRITIC_INPUT_DIM, &mut rng);
        let rewards: Vec<f64> = (0..cfg.batch).map(|_| rng.sample(StandardNormal)).collect();
        let dones: Vec<bool> = (0..cfg.batch).map(|_| rng.random_bool(0.25)).collect();
        let targets = td_targets(&c, &rewards, &nx, &dones, cfg.gamma)?;
        let (_, cgrad) = critic_loss_grad(&c, &x, &targets, cfg.value_coef)?;
        let cflat = c.to_flat();
        let dirs = directions(&cgrad, cfg, &mut rng);
        check_loss(
            &cflat,
            &cgrad,
            dirs,
            cfg.h,
            cfg.floor,
            |f| {
                let q = with_flat(&c, f);
                let mut tape = Tape::new();
                let (l, _) = critic_loss(&mut tape, &q, &x, &targets, cfg.value_coef);
                tape.scalar(l)
            },
            |f| relu_signs(&with_flat(&c, f), &x).into_iter().map(u8::from).collect(),
            &mut cri,
        );
    }
    Ok(GradOracleReport {
        max_rel_err: pol.max.max(cri.max),
        max_rel_err_policy: pol.max,
        max_rel_err_critic: cri.max,
        checks: pol.checks + cri.checks,
        skipped: pol.skipped + cri.skipped,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_few_instances_pass() {
        let r = grad_oracle(&GradOracleConfig { instances: 3, ..Default::default() }).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        assert!(r.checks > 0);
    }
}
