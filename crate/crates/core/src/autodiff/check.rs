//! Central-difference gradient oracle.

/// Compares an analytic gradient against central differences of `f`.
///
/// Returns the largest componentwise `|ad - fd| / (|fd| + 1e-8)`.
pub fn finite_diff_check(f: impl Fn(&[f64]) -> f64, grad: &[f64], params: &[f64], h: f64) -> f64 {
    assert_eq!(grad.len(), params.len(), "gradient and parameter lengths differ");
    let fd = central_differences(&f, params, h);
    grad.iter()
        .zip(&fd)
        .map(|(ad, fd)| (ad - fd).abs() / (fd.abs() + 1e-8))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of `f` at `params`.
pub fn central_differences(f: impl Fn(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
    let mut x = params.to_vec();
    (0..params.len())
        .map(|i| {
            let x0 = x[i];
            x[i] = x0 + h;
            let fp = f(&x);
            x[i] = x0 - h;
            let fm = f(&x);
            x[i] = x0;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Checks a gradient along a direction: returns
/// `|<grad, dir> - fd| / (|fd| + 1e-8)` where `fd` is the central
/// difference of `f` along `dir`. Useful when `params` is too large for a
/// componentwise sweep.
pub fn directional_check(
    f: impl Fn(&[f64]) -> f64,
    grad: &[f64],
    params: &[f64],
    dir: &[f64],
    h: f64,
) -> f64 {
    assert_eq!(dir.len(), params.len(), "direction and parameter lengths differ");
    let shifted = |s: f64| -> Vec<f64> { params.iter().zip(dir).map(|(p, d)| p + s * d).collect() };
    let fd = (f(&shifted(h)) - f(&shifted(-h))) / (2.0 * h);
    let ad: f64 = grad.iter().zip(dir).map(|(g, d)| g * d).sum();
    (ad - fd).abs() / (fd.abs() + 1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let f = |x: &[f64]| 3.0 * x[0] - 2.0 * x[1] + 0.5;
        let err = finite_diff_check(f, &[3.0, -2.0], &[0.25, -1.5], 1e-3);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let f = |_: &[f64]| 4.0;
        let fd = central_differences(f, &[1.0, 2.0], 1e-4);
        assert_eq!(fd, vec![0.0, 0.0]);
        assert_eq!(finite_diff_check(f, &[0.0, 0.0], &[1.0, 2.0], 1e-4), 0.0);
    }

    #[test]
    fn directional_matches_quadratic() {
        let f = |x: &[f64]| x[0] * x[0] + x[0] * x[1];
        let p = [1.0, 2.0];
        let g = [2.0 * p[0] + p[1], p[0]];
        assert!(directional_check(f, &g, &p, &[0.6, -0.8], 1e-5) < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let f = |x: &[f64]| x[0] * x[0];
        assert!(finite_diff_check(f, &[1.0], &[1.0], 1e-4) > 0.4);
    }
}
