use crate::neural::{NetworkParams, NeuralError, ParamVars, Tape, Var};
use ndarray::Array2;

const HALF_LN_TAU: f64 = 0.918_938_533_204_672_7;

/// Inputs of the clipped surrogate for one agent.
#[derive(Debug, Clone)]
pub struct PolicyMinibatch {
    pub obs: Array2<f64>,
    /// Pre-squash samples `u`; the squash Jacobian cancels in the ratio.
    pub pre_squash: Array2<f64>,
    /// Gaussian log-density of `u` under the behaviour policy.
    pub old_log_prob: Vec<f64>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PpoStats {
    /// Mean clipped surrogate (to be maximized).
    pub objective: f64,
    pub entropy: f64,
    /// Fraction of samples with `|r - 1| > eps`.
    pub clip_frac: f64,
    /// Mean of `(r - 1) - log r`.
    pub approx_kl: f64,
}

fn column(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column shape")
}

/// Records `-(mean(min(r A, clip(r, 1-eps, 1+eps) A)) + c_ent H)` on a tape.
pub fn ppo_loss(
    tape: &mut Tape,
    params: &NetworkParams,
    mb: &PolicyMinibatch,
    clip_eps: f64,
    entropy_coef: f64,
) -> Result<(Var, ParamVars, PpoStats), NeuralError> {
    let x = tape.leaf(mb.obs.clone());
    let (mean, vars) = params.forward_tape(tape, x);
    let log_std = vars
        .log_std
        .ok_or(NeuralError::Spec("network has no policy head".into()))?;
    let lp = tape.gaussian_log_density(mb.pre_squash.clone(), mean, log_std);
    let old = tape.leaf(column(&mb.old_log_prob));
    let log_ratio = tape.sub(lp, old);
    let ratio = tape.exp(log_ratio);
    let adv = tape.leaf(column(&mb.advantages));
    let surr1 = tape.mul(ratio, adv);
    let clipped = tape.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    let surr2 = tape.mul(clipped, adv);
    let surr = tape.min(surr1, surr2);
    let objective = tape.mean(surr);
    let ls_sum = tape.sum_all(log_std);
    let n_act = tape.value(log_std).len() as f64;
    let entropy = tape.add_scalar(ls_sum, n_act * (0.5 + HALF_LN_TAU));
    let bonus = tape.scale(entropy, entropy_coef);
    let gain = tape.add(objective, bonus);
    let loss = tape.scale(gain, -1.0);

    let r = tape.value(ratio);
    let n = r.len() as f64;
    let stats = PpoStats {
        objective: tape.scalar(objective),
        entropy: tape.scalar(entropy),
        clip_frac: r.iter().filter(|r| (*r - 1.0).abs() > clip_eps).count() as f64 / n,
        approx_kl: r.iter().map(|r| (r - 1.0) - r.ln()).sum::<f64>() / n,
    };
    Ok((loss, vars, stats))
}

/// Loss value, flat gradient and statistics of [`ppo_loss`].
pub fn ppo_loss_grad(
    params: &NetworkParams,
    mb: &PolicyMinibatch,
    clip_eps: f64,
    entropy_coef: f64,
) -> Result<(f64, Vec<f64>, PpoStats), NeuralError> {
    let mut tape = Tape::new();
    let (loss, vars, stats) = ppo_loss(&mut tape, params, mb, clip_eps, entropy_coef)?;
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), params.flat_grad(&vars, &grads), stats))
}

/// Records `c_v mean((V(x) - target)^2)` with constant targets.
pub fn critic_loss(
    tape: &mut Tape,
    critic: &NetworkParams,
    inputs: &Array2<f64>,
    targets: &[f64],
    value_coef: f64,
) -> (Var, ParamVars) {
    let x = tape.leaf(inputs.clone());
    let (v, vars) = critic.forward_tape(tape, x);
    let t = tape.leaf(column(targets));
    let d = tape.sub(v, t);
    let sq = tape.square(d);
    let m = tape.mean(sq);
    (tape.scale(m, value_coef), vars)
}

pub fn critic_loss_grad(
    critic: &NetworkParams,
    inputs: &Array2<f64>,
    targets: &[f64],
    value_coef: f64,
) -> Result<(f64, Vec<f64>), NeuralError> {
    let mut tape = Tape::new();
    let (loss, vars) = critic_loss(&mut tape, critic, inputs, targets, value_coef);
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), critic.flat_grad(&vars, &grads)))
}

/// `R + gamma V(s', a')`, with the bootstrap dropped on terminal transitions.
pub fn td_targets(
    critic: &NetworkParams,
    rewards: &[f64],
    next_inputs: &Array2<f64>,
    dones: &[bool],
    gamma: f64,
) -> Result<Vec<f64>, NeuralError> {
    let next = critic.value(next_inputs)?;
    Ok(rewards
        .iter()
        .zip(next)
        .zip(dones)
        .map(|((r, v), d)| if *d { *r } else { r + gamma * v })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{gaussian_log_prob, Head, MlpSpec};

    fn tiny_policy() -> NetworkParams {
        NetworkParams::init(
            &MlpSpec {
                input_dim: 3,
                hidden: vec![5],
                output_dim: 2,
                head: Head::GaussianPolicy { log_std_init: -0.5 },
                output_gain: 1.0,
            },
            4,
        )
        .unwrap()
    }

    fn batch(p: &NetworkParams, shift: [f64; 2], adv: [f64; 2]) -> PolicyMinibatch {
        let obs = ndarray::array![[0.2, -0.1, 0.5], [1.0, 0.3, -0.7]];
        let u = ndarray::array![[0.1, -0.2], [0.4, 0.0]];
        let mean = p.forward(&obs).unwrap();
        let ls: Vec<f64> = p.log_std.as_ref().unwrap().iter().copied().collect();
        let old = (0..2)
            .map(|r| gaussian_log_prob(&u.row(r).to_vec(), &mean.row(r).to_vec(), &ls) + shift[r])
            .collect();
        PolicyMinibatch {
            obs,
            pre_squash: u,
            old_log_prob: old,
            advantages: adv.to_vec(),
        }
    }

    #[test]
    fn unit_ratio_gives_mean_advantage() {
        let p = tiny_policy();
        let mb = batch(&p, [0.0, 0.0], [0.7, -0.3]);
        let (_, _, s) = ppo_loss_grad(&p, &mb, 0.2, 0.0).unwrap();
        assert!((s.objective - 0.2).abs() < 1e-12);
        assert_eq!(s.clip_frac, 0.0);
    }

    #[test]
    fn hand_built_two_sample_objective() {
        // r = exp(-shift): sample 0 has r = e^0.3 > 1.2 and A > 0 (clipped),
        // sample 1 has r = e^-0.1 inside the band and A < 0.
        let p = tiny_policy();
        let mb = batch(&p, [-0.3, 0.1], [2.0, -1.0]);
        let (_, _, s) = ppo_loss_grad(&p, &mb, 0.2, 0.0).unwrap();
        let r1 = (-0.1f64).exp();
        let expect = 0.5 * ((1.2 * 2.0f64).min(0.3f64.exp() * 2.0) + (r1 * -1.0f64).min(r1.clamp(0.8, 1.2) * -1.0));
        assert!((s.objective - expect).abs() < 1e-10, "{} vs {expect}", s.objective);
    }

    #[test]
    fn critic_zero_with_unit_reward() {
        let mut c = NetworkParams::init(&MlpSpec::value(4), 0).unwrap();
        let n = c.num_params();
        c.set_flat(&vec![0.0; n]).unwrap();
        let x = Array2::from_elem((3, 4), 0.5);
        let t = td_targets(&c, &[1.0; 3], &x, &[false, true, false], 0.99).unwrap();
        assert_eq!(t, vec![1.0; 3]);
        let (l, _) = critic_loss_grad(&c, &x, &t, 1.0).unwrap();
        assert_eq!(l, 1.0);
    }
}
