use super::NeuralError;
use ndarray::{Array2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `x W + b`, with `b` a row broadcast over the batch.
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Clip { a: Var, lo: f64, hi: f64 },
    Min(Var, Var),
    Mean(Var),
    SumCols(Var),
    SumAll(Var),
    /// Row-wise log-density of constant samples under `Normal(mean, exp(log_std))`.
    GaussianLogDensity { u: Array2<f64>, mean: Var, log_std: Var },
    /// Step function; has no usable derivative.
    Indicator,
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Reverse-mode differentiation record over 2D arrays (rows are samples).
/// Binary element-wise ops broadcast a `1 x n` operand over the rows of the other.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zeros when the output does not depend on it.
    pub fn of(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.grads[v.0].clone().unwrap_or_else(|| Array2::zeros(shape))
    }
}

const HALF_LN_TAU: f64 = 0.918_938_533_204_672_7;

fn broadcast_shape(a: &Array2<f64>, b: &Array2<f64>) -> (usize, usize) {
    let rows = a.nrows().max(b.nrows());
    (rows, a.ncols().max(b.ncols()))
}

/// Sums a gradient down to `shape` when the operand was broadcast.
fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn zip_map(a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let shape = broadcast_shape(a, b);
    let a = a.broadcast(shape).expect("incompatible shapes");
    let b = b.broadcast(shape).expect("incompatible shapes");
    let mut out = Array2::zeros(shape);
    Zip::from(&mut out).and(&a).and(&b).for_each(|o, &x, &y| *o = f(x, y));
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let v = self.value(x).dot(self.value(w)) + self.value(b);
        self.push(v, Op::Affine { x, w, b })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Clamp to `[lo, hi]`; the gradient passes wherever the input lies in the
    /// closed interval.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clip { a, lo, hi })
    }

    /// Element-wise minimum; ties select `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| if x <= y { x } else { y });
        self.push(v, Op::Min(a, b))
    }

    /// Mean of all elements, as `1 x 1`.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Row sums, as `rows x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a))
    }

    /// Sum of all elements, as `1 x 1`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Row-wise `sum_j log N(u_ij; mean_ij, exp(log_std_j))`, as `rows x 1`.
    pub fn gaussian_log_density(&mut self, u: Array2<f64>, mean: Var, log_std: Var) -> Var {
        let m = self.value(mean);
        let ls = self.value(log_std);
        let ls = ls.broadcast(m.raw_dim()).expect("log_std shape");
        let mut out = Array2::zeros((m.nrows(), 1));
        for r in 0..m.nrows() {
            let mut acc = 0.0;
            for c in 0..m.ncols() {
                let z = (u[[r, c]] - m[[r, c]]) * (-ls[[r, c]]).exp();
                acc += -0.5 * z * z - ls[[r, c]] - HALF_LN_TAU;
            }
            out[[r, 0]] = acc;
        }
        self.push(out, Op::GaussianLogDensity { u, mean, log_std })
    }

    /// `1` where the input is positive, else `0`. Not differentiable.
    pub fn indicator(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(v, Op::Indicator)
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Result<Gradients, NeuralError> {
        let shape = self.value(out).dim();
        if shape != (1, 1) {
            return Err(NeuralError::Shape(format!(
                "backward needs a scalar output, got {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut send = |v: Var, d: Array2<f64>| {
                let d = reduce_to(d, self.value(v).dim());
                match &mut grads[v.0] {
                    Some(acc) => *acc += &d,
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Affine { x, w, b } => {
                    send(*x, g.dot(&self.value(*w).t()));
                    send(*w, self.value(*x).t().dot(&g));
                    send(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Relu(a) => {
                    let d = zip_map(&g, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    send(*a, d);
                }
                Op::Tanh(a) => {
                    let d = zip_map(&g, &node.value, |g, y| g * (1.0 - y * y));
                    send(*a, d);
                }
                Op::Exp(a) => send(*a, &g * &node.value),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, -g);
                }
                Op::Mul(a, b) => {
                    send(*a, zip_map(&g, self.value(*b), |g, y| g * y));
                    send(*b, zip_map(&g, self.value(*a), |g, x| g * x));
                }
                Op::Scale(a, c) => send(*a, g * *c),
                Op::AddScalar(a) => send(*a, g),
                Op::Square(a) => send(*a, zip_map(&g, self.value(*a), |g, x| 2.0 * g * x)),
                Op::Clip { a, lo, hi } => {
                    let d = zip_map(&g, self.value(*a), |g, x| {
                        if x >= *lo && x <= *hi {
                            g
                        } else {
                            0.0
                        }
                    });
                    send(*a, d);
                }
                Op::Min(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let pick_a = zip_map(va, vb, |x, y| if x <= y { 1.0 } else { 0.0 });
                    let ga = zip_map(&g, &pick_a, |g, p| g * p);
                    let gb = zip_map(&g, &pick_a, |g, p| g * (1.0 - p));
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let n = x.len() as f64;
                    send(*a, Array2::from_elem(x.raw_dim(), g[[0, 0]] / n));
                }
                Op::SumCols(a) => {
                    let x = self.value(*a);
                    let d = g.broadcast(x.raw_dim()).expect("sum shape").to_owned();
                    send(*a, d);
                }
                Op::SumAll(a) => {
                    let x = self.value(*a);
                    send(*a, Array2::from_elem(x.raw_dim(), g[[0, 0]]));
                }
                Op::GaussianLogDensity { u, mean, log_std } => {
                    let m = self.value(*mean);
                    let ls = self.value(*log_std).broadcast(m.raw_dim()).expect("log_std shape").to_owned();
                    let mut dm = Array2::zeros(m.raw_dim());
                    let mut dls = Array2::zeros(m.raw_dim());
                    for r in 0..m.nrows() {
                        let gr = g[[r, 0]];
                        for c in 0..m.ncols() {
                            let inv_var = (-2.0 * ls[[r, c]]).exp();
                            let diff = u[[r, c]] - m[[r, c]];
                            dm[[r, c]] = gr * diff * inv_var;
                            dls[[r, c]] = gr * (diff * diff * inv_var - 1.0);
                        }
                    }
                    send(*mean, dm);
                    send(*log_std, dls);
                }
                Op::Indicator => {
                    return Err(NeuralError::UnsupportedPrimitive("indicator"));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_matches_closed_form() {
        let mut t = Tape::new();
        let w0 = array![[0.3, -1.2], [0.7, 0.4], [-0.5, 2.0]];
        let x0 = array![[1.5, -0.25, 0.75]];
        let y0 = array![[0.1, -0.3]];
        let x = t.leaf(x0.clone());
        let w = t.leaf(w0.clone());
        let b = t.leaf(Array2::zeros((1, 2)));
        let y = t.leaf(y0.clone());
        let p = t.affine(x, w, b);
        let r = t.sub(p, y);
        let s = t.square(r);
        let l = t.sum_all(s);
        let g = t.backward(l).unwrap();
        let resid = x0.dot(&w0) - &y0;
        let expect = 2.0 * x0.t().dot(&resid);
        let got = g.get(w).unwrap();
        for (a, e) in got.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    #[test]
    fn relu_at_zero_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(array![[0.0, 1.0, -1.0]]);
        let r = t.relu(x);
        let s = t.sum_all(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &array![[0.0, 1.0, 0.0]]);
    }

    #[test]
    fn clip_and_min_tie_rules() {
        let mut t = Tape::new();
        let x = t.leaf(array![[0.8, 1.2, 1.5, 0.5]]);
        let c = t.clip(x, 0.8, 1.2);
        let s = t.sum_all(c);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &array![[1.0, 1.0, 0.0, 0.0]]);

        let mut t = Tape::new();
        let a = t.leaf(array![[1.0, 2.0]]);
        let b = t.leaf(array![[1.0, 1.0]]);
        let m = t.min(a, b);
        let s = t.sum_all(m);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &array![[1.0, 0.0]]);
        assert_eq!(g.get(b).unwrap(), &array![[0.0, 1.0]]);
    }

    #[test]
    fn indicator_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(array![[0.5]]);
        let i = t.indicator(x);
        let e = t.backward(i).unwrap_err();
        assert_eq!(e, NeuralError::UnsupportedPrimitive("indicator"));
    }

    #[test]
    fn broadcast_row_gradient_is_summed() {
        let mut t = Tape::new();
        let a = t.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = t.leaf(array![[10.0, 20.0]]);
        let m = t.mul(a, b);
        let s = t.sum_all(m);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap(), &array![[4.0, 6.0]]);
    }
}
