use super::mlp::NetworkParams;
use super::NeuralError;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

const HALF_LN_TAU: f64 = 0.918_938_533_204_672_7;
const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    Sample,
    Mean,
}

/// One squashed action with its pre-squash sample and log-density.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub action: Vec<f64>,
    pub pre_squash: Vec<f64>,
    pub log_prob: f64,
}

/// `log(1 - tanh(u)^2)`, evaluated without cancellation.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    let softplus = |x: f64| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

/// `sum_j log N(u_j; mean_j, exp(log_std_j))`.
pub fn gaussian_log_prob(u: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    u.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((u, m), ls)| {
            let z = (u - m) * (-ls).exp();
            -0.5 * z * z - ls - HALF_LN_TAU
        })
        .sum()
}

/// Log-density of `a = tanh(u)` given the pre-squash sample `u`.
pub fn squashed_log_prob(u: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    gaussian_log_prob(u, mean, log_std) - u.iter().map(|&x| log_one_minus_tanh_sq(x)).sum::<f64>()
}

/// Entropy of the pre-squash Gaussian.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 + HALF_LN_TAU).sum()
}

fn log_std_of(params: &NetworkParams) -> Result<Vec<f64>, NeuralError> {
    params
        .log_std
        .as_ref()
        .map(|l| l.iter().copied().collect())
        .ok_or(NeuralError::Spec("network has no policy head".into()))
}

/// Acts on a batch of observations (one row each).
pub fn policy_forward_batch<R: Rng + ?Sized>(
    params: &NetworkParams,
    obs: &Array2<f64>,
    mode: ActMode,
    rng: &mut R,
) -> Result<Vec<PolicySample>, NeuralError> {
    let log_std = log_std_of(params)?;
    let mean = params.forward(obs)?;
    let mut out = Vec::with_capacity(mean.nrows());
    for row in mean.rows() {
        let m: Vec<f64> = row.to_vec();
        let u: Vec<f64> = match mode {
            ActMode::Mean => m.clone(),
            ActMode::Sample => m
                .iter()
                .zip(&log_std)
                .map(|(m, ls)| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + ls.exp() * z
                })
                .collect(),
        };
        let log_prob = squashed_log_prob(&u, &m, &log_std);
        out.push(PolicySample {
            action: u.iter().map(|x| x.tanh()).collect(),
            pre_squash: u,
            log_prob,
        });
    }
    Ok(out)
}

/// Acts on a single observation.
pub fn policy_forward<R: Rng + ?Sized>(
    params: &NetworkParams,
    obs: &[f64],
    mode: ActMode,
    rng: &mut R,
) -> Result<PolicySample, NeuralError> {
    let x = Array2::from_shape_vec((1, obs.len()), obs.to_vec())
        .map_err(|e| NeuralError::Shape(e.to_string()))?;
    Ok(policy_forward_batch(params, &x, mode, rng)?.remove(0))
}
