//! Central finite differences against reverse-mode gradients.

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// `(f(x + h d) - f(x - h d)) / 2h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], dir: &[f64], h: f64) -> f64 {
    let plus: Vec<f64> = x.iter().zip(dir).map(|(x, d)| x + h * d).collect();
    let minus: Vec<f64> = x.iter().zip(dir).map(|(x, d)| x - h * d).collect();
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Worst relative error between `grad . d` and the central difference along
/// each direction.
pub fn check_directions(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    grad: &[f64],
    dirs: &[Vec<f64>],
    h: f64,
    floor: f64,
) -> f64 {
    dirs.iter()
        .map(|d| {
            let analytic: f64 = grad.iter().zip(d).map(|(g, d)| g * d).sum();
            let numeric = central_difference(&mut f, x, d, h);
            relative_error(analytic, numeric, floor)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_directional_derivative() {
        let f = |x: &[f64]| x[0].powi(3) + 2.0 * x[0] * x[1];
        let x = [1.3, -0.4];
        let g = [3.0 * 1.3f64.powi(2) + 2.0 * -0.4, 2.0 * 1.3];
        let e = check_directions(f, &x, &g, &[vec![1.0, 0.0], vec![0.6, 0.8]], 1e-5, 1e-8);
        assert!(e < 1e-9, "{e}");
    }
}
