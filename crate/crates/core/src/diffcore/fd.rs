//! Central finite differences, used as the independent oracle for tape
//! gradients throughout the test suites.

/// Approximates the gradient of `f` at `x` by central differences with
/// step `h`: `(f(x + h e_i) - f(x - h e_i)) / (2h)` per coordinate.
pub fn finite_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * h));
    }
    grad
}
