use super::tape::{Tape, Var};
use super::NeuralError;
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    /// Mean output plus a state-independent learned `log_std` per output.
    GaussianPolicy { log_std_init: f64 },
    ScalarValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub head: Head,
    /// Multiplier applied to the orthogonal output layer at initialization.
    #[serde(default = "unit")]
    pub output_gain: f64,
}

fn unit() -> f64 {
    1.0
}

pub const DEFAULT_HIDDEN: [usize; 3] = [256, 256, 128];

impl MlpSpec {
    pub fn policy(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: DEFAULT_HIDDEN.to_vec(),
            output_dim,
            head: Head::GaussianPolicy { log_std_init: -0.5 },
            output_gain: 1.0,
        }
    }

    pub fn value(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: DEFAULT_HIDDEN.to_vec(),
            output_dim: 1,
            head: Head::ScalarValue,
            output_gain: 1.0,
        }
    }

    /// `(rows, cols)` of each layer's weight matrix; activations are `x W + b`.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(NeuralError::Spec("dimensions must be positive".into()));
        }
        if matches!(self.head, Head::ScalarValue) && self.output_dim != 1 {
            return Err(NeuralError::Spec("value head must have one output".into()));
        }
        Ok(())
    }
}

/// Weights, biases and the optional policy `log_std`. The flat view orders
/// tensors layer by layer (weights row-major, then bias), then `log_std`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub spec: MlpSpec,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array2<f64>>,
    pub log_std: Option<Array2<f64>>,
}

/// Matrix with orthonormal columns (tall) or rows (wide), from a Gaussian draw
/// orthonormalized by modified Gram-Schmidt with one re-orthogonalization pass.
pub fn orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (n, k) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let mut q = Array2::<f64>::zeros((n, k));
    for v in q.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    for j in 0..k {
        for _pass in 0..2 {
            for i in 0..j {
                let d = q.column(i).dot(&q.column(j));
                let qi = q.column(i).to_owned();
                q.column_mut(j).scaled_add(-d, &qi);
            }
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|x| x / norm);
    }
    if rows >= cols {
        q
    } else {
        q.reversed_axes().as_standard_layout().to_owned()
    }
}

impl NetworkParams {
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self, NeuralError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = spec.layer_shapes();
        let last = shapes.len() - 1;
        let weights = shapes
            .iter()
            .enumerate()
            .map(|(l, &(r, c))| {
                let w = orthogonal(r, c, &mut rng);
                if l == last && spec.output_gain != 1.0 {
                    w * spec.output_gain
                } else {
                    w
                }
            })
            .collect();
        let biases = shapes.iter().map(|&(_, c)| Array2::zeros((1, c))).collect();
        let log_std = match spec.head {
            Head::GaussianPolicy { log_std_init } => {
                Some(Array2::from_elem((1, spec.output_dim), log_std_init))
            }
            Head::ScalarValue => None,
        };
        Ok(Self {
            spec: spec.clone(),
            weights,
            biases,
            log_std,
        })
    }

    /// Parameter tensors in flat order with their names.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut v = Vec::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            v.push((format!("layer{l}.weight"), w));
            v.push((format!("layer{l}.bias"), b));
        }
        if let Some(ls) = &self.log_std {
            v.push(("log_std".into(), ls));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v: Vec<&mut Array2<f64>> = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            v.push(w);
            v.push(b);
        }
        if let Some(ls) = &mut self.log_std {
            v.push(ls);
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.tensors() {
            out.extend(t.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), NeuralError> {
        if flat.len() != self.num_params() {
            return Err(NeuralError::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            for (dst, src) in t.iter_mut().zip(&flat[off..]) {
                *dst = *src;
            }
            off += t.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<(), NeuralError> {
        if x.ncols() != self.spec.input_dim {
            return Err(NeuralError::Shape(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.spec.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NeuralError::NonFinite("input"));
        }
        Ok(())
    }

    /// Network output for a batch of inputs (mean for policies).
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>, NeuralError> {
        self.check_input(x)?;
        let last = self.weights.len() - 1;
        let mut h = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.dot(w) + b;
            if l < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Records the network on a tape. Returns the output and the parameter
    /// leaves in flat order.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var) -> (Var, ParamVars) {
        let last = self.weights.len() - 1;
        let mut vars = Vec::with_capacity(2 * self.weights.len() + 1);
        let mut h = x;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(b.clone());
            vars.push(wv);
            vars.push(bv);
            h = tape.affine(h, wv, bv);
            if l < last {
                h = tape.relu(h);
            }
        }
        let log_std = self.log_std.as_ref().map(|ls| {
            let v = tape.leaf(ls.clone());
            vars.push(v);
            v
        });
        (h, ParamVars { vars, log_std })
    }

    /// Flattens the gradients of the parameter leaves.
    pub fn flat_grad(&self, vars: &ParamVars, grads: &super::tape::Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (v, (_, t)) in vars.vars.iter().zip(self.tensors()) {
            out.extend(grads.of(*v, t.dim()).iter());
        }
        out
    }

    /// Scalar outputs of a value network.
    pub fn value(&self, x: &Array2<f64>) -> Result<Vec<f64>, NeuralError> {
        Ok(self.forward(x)?.index_axis(Axis(1), 0).to_vec())
    }
}

/// Parameter leaves created by [`NetworkParams::forward_tape`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub vars: Vec<Var>,
    pub log_std: Option<Var>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_dev_from_identity(m: &Array2<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for ((i, j), v) in m.indexed_iter() {
            let e = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((v - e).abs());
        }
        worst
    }

    #[test]
    fn init_is_orthogonal_deterministic_with_zero_bias() {
        let spec = MlpSpec::policy(210, 11);
        let a = NetworkParams::init(&spec, 3).unwrap();
        let b = NetworkParams::init(&spec, 3).unwrap();
        assert_eq!(a, b);
        for w in &a.weights {
            let g = if w.nrows() >= w.ncols() { w.t().dot(w) } else { w.dot(&w.t()) };
            assert!(max_dev_from_identity(&g) < 1e-5);
        }
        assert!(a.biases.iter().all(|b| b.iter().all(|v| *v == 0.0)));
        assert_eq!(a.log_std.as_ref().unwrap()[[0, 0]], -0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sq = orthogonal(128, 128, &mut rng);
        assert!(max_dev_from_identity(&sq.t().dot(&sq)) < 1e-5);
    }

    #[test]
    fn flat_round_trip() {
        let spec = MlpSpec {
            input_dim: 3,
            hidden: vec![4],
            output_dim: 2,
            head: Head::GaussianPolicy { log_std_init: -0.5 },
            output_gain: 1.0,
        };
        let mut p = NetworkParams::init(&spec, 1).unwrap();
        let flat: Vec<f64> = (0..p.num_params()).map(|i| i as f64).collect();
        p.set_flat(&flat).unwrap();
        assert_eq!(p.to_flat(), flat);
        assert_eq!(p.weights[0][[0, 1]], 1.0);
        assert_eq!(p.biases[0][[0, 0]], 12.0);
    }

    #[test]
    fn zero_weights_give_zero_value() {
        let mut p = NetworkParams::init(&MlpSpec::value(5), 0).unwrap();
        let n = p.num_params();
        p.set_flat(&vec![0.0; n]).unwrap();
        let x = Array2::from_elem((3, 5), 0.7);
        assert_eq!(p.value(&x).unwrap(), vec![0.0; 3]);
    }
}
