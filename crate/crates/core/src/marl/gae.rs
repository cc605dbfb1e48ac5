/// Generalized advantage estimates for one contiguous trajectory segment.
///
/// `next_values[t]` is the critic value of the successor state-action, already
/// zero where `dones[t]` is set. The recursion restarts after every done, and
/// the last step bootstraps through `next_values` only.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let cont = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_values[t] * cont - values[t];
        // the segment is truncated after its last step
        let carry = if t + 1 < n { next_adv } else { 0.0 };
        adv[t] = delta + gamma * lambda * cont * carry;
        next_adv = adv[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Zero mean, unit variance (population), unchanged when the spread vanishes.
pub fn normalize(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in x.iter_mut() {
        *v -= mean;
        if std > 1e-12 {
            *v /= std;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_terminal_episode() {
        let (a, r) = gae(&[1.0], &[0.0], &[0.0], &[true], 0.99, 0.95);
        assert_eq!(a, vec![1.0]);
        assert_eq!(r, vec![1.0]);
    }

    #[test]
    fn lambda_zero_is_td_error() {
        let rw = [0.5, -0.2, 1.0];
        let v = [0.1, 0.3, -0.4];
        let nv = [0.3, -0.4, 0.9];
        let (a, _) = gae(&rw, &v, &nv, &[false; 3], 0.9, 0.0);
        for t in 0..3 {
            assert_eq!(a[t], rw[t] + 0.9 * nv[t] - v[t]);
        }
    }

    #[test]
    fn lambda_one_zero_values_is_discounted_return() {
        let rw = [1.0, 2.0, 3.0, 4.0];
        let (a, _) = gae(&rw, &[0.0; 4], &[0.0; 4], &[false, false, false, true], 0.5, 1.0);
        assert_eq!(a[0], 1.0 + 0.5 * 2.0 + 0.25 * 3.0 + 0.125 * 4.0);
        assert_eq!(a[3], 4.0);
    }

    #[test]
    fn normalization() {
        let mut x = vec![1.0, 2.0, 3.0, 4.0];
        normalize(&mut x);
        assert!(x.iter().sum::<f64>().abs() < 1e-12);
        let var = x.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var - 1.0).abs() < 1e-12);
    }
}
