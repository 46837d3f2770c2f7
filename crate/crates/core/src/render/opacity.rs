//! Distance-to-opacity mapping.

/// `M(s; beta) = 4 sigmoid(beta s) (1 - sigmoid(beta s))`.
///
/// Evaluated through `e^{-|beta s|}`, which makes the result exactly
/// symmetric in `s` and exactly 1 at `s = 0`.
pub fn map_opacity(s: f64, beta: f64) -> f64 {
    assert!(beta > 0.0, "beta must be positive, got {beta}");
    let q = (-(beta * s).abs()).exp();
    4.0 * q / ((1.0 + q) * (1.0 + q))
}

/// The `|s|` at which the opacity falls to one half.
pub fn half_width(beta: f64) -> f64 {
    (3.0 + 2.0 * 2f64.sqrt()).ln() / beta
}
