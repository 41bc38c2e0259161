//! Central finite-difference gradient checking.
//!
//! The checker only evaluates the scalar function it is given, so it stays
//! independent of whichever analytic backward pass it is used to verify.

/// Gradient of `f` at `point` by central differences with step `h`.
pub fn central_diff_grad<F>(point: &[f64], h: f64, f: F) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(point.len());
    let mut work = point.to_vec();
    for i in 0..point.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work);
        work[i] = orig - h;
        let fm = f(&work);
        work[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Relative error between two gradient vectors: `|a - b| / max(|b|, 1e-12)`
/// in the Euclidean norm.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_quadratic_gradient() {
        // f(x) = sum x_i^2, grad = 2x.
        let x = [1.0, -2.0, 3.5];
        let g = central_diff_grad(&x, 1e-5, |v| v.iter().map(|a| a * a).sum());
        let expect = [2.0, -4.0, 7.0];
        assert!(rel_error(&g, &expect) < 1e-9);
    }
}
