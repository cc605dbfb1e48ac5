use super::gae::{gae, normalize};
use super::loss::{critic_loss_grad, ppo_loss_grad, td_targets, PolicyMinibatch, PpoStats};
use super::rollout::RolloutBatch;
use super::{MarlError, TrainConfig};
use crate::neural::{NetworkParams, OptimizerState};
use ndarray::Axis;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// Fills `advantages` and `returns` from the shared team reward, one GAE
/// pass per environment row, then optionally normalizes the advantages.
pub fn compute_advantages(batch: &mut RolloutBatch, gamma: f64, lambda: f64, normalize_adv: bool) {
    let t = batch.horizon;
    for e in 0..batch.n_envs {
        let r = e * t..(e + 1) * t;
        let (adv, ret) = gae(
            &batch.rewards[0][r.clone()],
            &batch.values[r.clone()],
            &batch.next_values[r.clone()],
            &batch.dones[r.clone()],
            gamma,
            lambda,
        );
        batch.advantages[r.clone()].copy_from_slice(&adv);
        batch.returns[r].copy_from_slice(&ret);
    }
    if normalize_adv {
        normalize(&mut batch.advantages);
    }
}

/// Shuffled minibatch index sets covering `0..n` once.
pub fn minibatch_indices(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size.max(1)).map(|c| c.to_vec()).collect()
}

fn mean_stats(acc: &[PpoStats]) -> PpoStats {
    let n = acc.len().max(1) as f64;
    let mut s = PpoStats::default();
    for a in acc {
        s.objective += a.objective / n;
        s.entropy += a.entropy / n;
        s.clip_frac += a.clip_frac / n;
        s.approx_kl += a.approx_kl / n;
    }
    s
}

/// Clipped-surrogate epochs for one agent on the shared advantages.
pub fn ppo_update(
    params: &mut NetworkParams,
    opt: &mut OptimizerState,
    batch: &RolloutBatch,
    agent: usize,
    cfg: &TrainConfig,
    lr: f64,
    update: u64,
    rng: &mut ChaCha8Rng,
) -> Result<PpoStats, MarlError> {
    let mut acc = Vec::new();
    for _ in 0..cfg.epochs {
        for idx in minibatch_indices(batch.len(), cfg.minibatch_size(), rng) {
            let mb = PolicyMinibatch {
                obs: batch.obs[agent].select(Axis(0), &idx),
                pre_squash: batch.pre_squash[agent].select(Axis(0), &idx),
                old_log_prob: idx.iter().map(|&i| batch.log_probs[agent][i]).collect(),
                advantages: idx.iter().map(|&i| batch.advantages[i]).collect(),
            };
            let (loss, grad, stats) = ppo_loss_grad(params, &mb, cfg.clip_eps, cfg.entropy_coef)?;
            if !loss.is_finite() {
                log::error!("agent {agent}: non-finite surrogate, stats {stats:?}");
                return Err(MarlError::NonFinite { what: "policy loss", update });
            }
            let mut flat = params.to_flat();
            opt.step(&mut flat, &grad, lr, &cfg.adam)?;
            params.set_flat(&flat)?;
            acc.push(stats);
        }
    }
    Ok(mean_stats(&acc))
}

/// Semi-gradient TD(0) epochs; targets use the current critic, detached.
pub fn critic_update(
    critic: &mut NetworkParams,
    opt: &mut OptimizerState,
    batch: &RolloutBatch,
    cfg: &TrainConfig,
    lr: f64,
    update: u64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, MarlError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..cfg.epochs {
        for idx in minibatch_indices(batch.len(), cfg.minibatch_size(), rng) {
            let x = batch.critic_in.select(Axis(0), &idx);
            let nx = batch.next_critic_in.select(Axis(0), &idx);
            let r: Vec<f64> = idx.iter().map(|&i| batch.rewards[0][i]).collect();
            let d: Vec<bool> = idx.iter().map(|&i| batch.dones[i]).collect();
            let targets = td_targets(critic, &r, &nx, &d, cfg.gamma)?;
            let (loss, grad) = critic_loss_grad(critic, &x, &targets, cfg.value_coef)?;
            if !loss.is_finite() {
                return Err(MarlError::NonFinite { what: "critic loss", update });
            }
            let mut flat = critic.to_flat();
            opt.step(&mut flat, &grad, lr, &cfg.adam)?;
            critic.set_flat(&flat)?;
            total += loss;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}
