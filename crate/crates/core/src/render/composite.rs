//! Front-to-back alpha compositing.

/// Ray whose accumulated weight is below this shows only background and
/// gets the depth sentinel.
pub const MIN_DEPTH_WEIGHT: f64 = 1e-4;

/// Compositing weights `w_i = alpha_i * prod_{j<i} (1 - alpha_j)`.
pub fn weights(alphas: &[f64]) -> Vec<f64> {
    let mut trans = 1.0;
    alphas
        .iter()
        .map(|&a| {
            assert!((0.0..=1.0).contains(&a), "opacity {a} outside [0, 1]");
            let w = a * trans;
            trans *= 1.0 - a;
            w
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Composited {
    pub rgb: [f64; 3],
    /// Weighted mean `t`, or `f64::INFINITY` for background rays.
    pub depth: f64,
    pub weight_sum: f64,
}

/// Composites samples ordered near to far over `background`.
pub fn composite(ts: &[f64], alphas: &[f64], colors: &[[f64; 3]], background: [f64; 3]) -> Composited {
    assert!(
        ts.len() == alphas.len() && ts.len() == colors.len(),
        "sample arrays differ in length"
    );
    assert!(ts.windows(2).all(|w| w[0] <= w[1]), "samples must be sorted near to far");
    let w = weights(alphas);
    let mut rgb = [0.0; 3];
    let mut wsum = 0.0;
    let mut wt = 0.0;
    for i in 0..ts.len() {
        for ch in 0..3 {
            rgb[ch] += w[i] * colors[i][ch];
        }
        wsum += w[i];
        wt += w[i] * ts[i];
    }
    let wsum = wsum.min(1.0);
    for ch in 0..3 {
        rgb[ch] += (1.0 - wsum) * background[ch];
    }
    let depth = if wsum < MIN_DEPTH_WEIGHT {
        f64::INFINITY
    } else {
        wt / wsum
    };
    Composited {
        rgb,
        depth,
        weight_sum: wsum,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let c = composite(&[1.0], &[1.0], &[[0.2, 0.4, 0.6]], [1.0; 3]);
        assert_eq!(c.rgb, [0.2, 0.4, 0.6]);
        assert_eq!(c.weight_sum, 1.0);
        assert_eq!(c.depth, 1.0);

        let c = composite(&[1.0, 2.0], &[0.5, 1.0], &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [1.0; 3]);
        assert_eq!(c.rgb, [0.5, 0.5, 0.0]);
        assert_eq!(c.weight_sum, 1.0);

        let c = composite(&[1.0, 2.0], &[0.0, 0.0], &[[0.3; 3]; 2], [1.0; 3]);
        assert_eq!(c.rgb, [1.0; 3]);
        assert_eq!(c.depth, f64::INFINITY);
    }

    #[test]
    #[should_panic(expected = "outside [0, 1]")]
    fn rejects_bad_alpha() {
        composite(&[1.0], &[-0.1], &[[0.0; 3]], [1.0; 3]);
    }

    proptest::proptest! {
        #[test]
        fn weights_sum_at_most_one(alphas in proptest::collection::vec(0.0f64..=1.0, 0..64)) {
            let s: f64 = weights(&alphas).iter().sum();
            proptest::prop_assert!(s <= 1.0 + 1e-12);
            proptest::prop_assert!(s >= 0.0);
        }
    }
}
