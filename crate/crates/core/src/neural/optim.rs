use super::NeuralError;
use serde::{Deserialize, Serialize};

/// `lr0 (1 + cos(pi step / total)) / 2`; `step` is clamped into `[0, total]`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    /// Global gradient-norm limit; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 10.0,
        }
    }
}

/// Adam moments for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Summary of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// AdamW step on one flat vector.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<StepInfo, NeuralError> {
        self.step_chunked(&mut [params], &[grads], lr, cfg)
    }

    /// AdamW step where the parameter vector is split into consecutive chunks.
    /// The clip norm is computed over all chunks, so the result is identical
    /// to a single flat step.
    pub fn step_chunked(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<StepInfo, NeuralError> {
        let n: usize = params.iter().map(|p| p.len()).sum();
        let ng: usize = grads.iter().map(|g| g.len()).sum();
        if n != self.m.len() || ng != n || params.len() != grads.len() {
            return Err(NeuralError::Shape(format!(
                "optimizer holds {} moments, got {n} parameters and {ng} gradients",
                self.m.len()
            )));
        }
        let mut sq = 0.0;
        for g in grads {
            for x in g.iter() {
                if !x.is_finite() {
                    return Err(NeuralError::NonFinite("gradient"));
                }
                sq += x * x;
            }
        }
        let grad_norm = sq.sqrt();
        let clip_scale = if cfg.clip_norm > 0.0 && grad_norm > cfg.clip_norm {
            cfg.clip_norm / grad_norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let mut off = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (k, (p, g)) in p.iter_mut().zip(g.iter()).enumerate() {
                let i = off + k;
                let g = g * clip_scale;
                self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
                self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
                let mh = self.m[i] / bc1;
                let vh = self.v[i] / bc2;
                *p -= lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * *p);
            }
            off += p.len();
        }
        Ok(StepInfo {
            grad_norm,
            clip_scale,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-4), 1e-4);
        assert!(cosine_lr(100, 100, 1e-4).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-4) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![0.5, -1.0];
        let mut s = OptimizerState::new(2);
        s.step(&mut p, &[0.0, 0.0], 1e-3, &cfg).unwrap();
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn clip_halves_norm_twenty() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0, 0.0];
        let mut s = OptimizerState::new(2);
        let info = s.step(&mut p, &[12.0, 16.0], 1e-3, &cfg).unwrap();
        assert_eq!(info.grad_norm, 20.0);
        assert_eq!(info.clip_scale, 0.5);
        assert!((s.m[0] - 0.1 * 6.0).abs() < 1e-15);
        assert!((s.m[1] - 0.1 * 8.0).abs() < 1e-15);
    }

    #[test]
    fn one_parameter_hand_computation() {
        // p = 2, g = 0.5, lr = 0.1, wd = 0.01, first step:
        // m = 0.05, v = 0.00025, mh = 0.5, vh = 0.25, update = 0.5 / (0.5 + 1e-8)
        let cfg = AdamConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut p = vec![2.0];
        let mut s = OptimizerState::new(1);
        s.step(&mut p, &[0.5], 0.1, &cfg).unwrap();
        let expect = 2.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 2.0);
        assert!((p[0] - expect).abs() < 1e-15, "{} vs {expect}", p[0]);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut s = OptimizerState::new(1);
        let e = s.step(&mut [1.0], &[f64::NAN], 0.1, &AdamConfig::default());
        assert_eq!(e.unwrap_err(), NeuralError::NonFinite("gradient"));
    }
}
