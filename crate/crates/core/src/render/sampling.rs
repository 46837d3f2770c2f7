//! Sample placement along a ray: the band around the traced surface, the
//! importance-sampled fine round and the interpolated surface root.

use rand::Rng as _;

use crate::rng::Rng;

/// `n` values spanning `[lo, hi]`.
///
/// Without jitter the values are evenly spaced and include both endpoints.
/// With jitter, one uniform draw is taken inside each of `n` equal strata.
pub fn uniform_samples(lo: f64, hi: f64, n: usize, jitter: Option<&mut Rng>) -> Vec<f64> {
    assert!(n >= 1, "need at least one sample");
    assert!(hi >= lo, "empty interval [{lo}, {hi}]");
    match jitter {
        None if n == 1 => vec![0.5 * (lo + hi)],
        None => {
            let step = (hi - lo) / (n - 1) as f64;
            let mut v: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
            v[n - 1] = hi;
            v
        }
        Some(rng) => {
            let step = (hi - lo) / n as f64;
            (0..n)
                .map(|i| lo + step * (i as f64 + rng.random::<f64>()))
                .collect()
        }
    }
}

/// The band `[t_d - delta, t_d + delta]` clipped to `t >= near`.
pub fn band(t_d: f64, delta: f64, near: f64) -> (f64, f64) {
    let hi = (t_d + delta).max(near);
    ((t_d - delta).max(near), hi)
}

/// `n` samples covering the band around `t_d`, sorted ascending.
pub fn coarse_sample(t_d: f64, delta: f64, n: usize, near: f64, jitter: Option<&mut Rng>) -> Vec<f64> {
    assert!(n >= 2, "coarse sampling needs at least two samples");
    assert!(delta > 0.0, "delta must be positive");
    let (lo, hi) = band(t_d, delta, near);
    uniform_samples(lo, hi, n, jitter)
}

/// Inverse-CDF samples from the piecewise-constant density that gives bin
/// `i` (around `coarse_ts[i]`) mass proportional to `weights[i]`.
///
/// Bin edges are `lo`, the midpoints between neighbouring coarse samples,
/// and `hi`. All-zero weights fall back to uniform sampling of `[lo, hi]`.
pub fn fine_sample(
    coarse_ts: &[f64],
    weights: &[f64],
    m: usize,
    lo: f64,
    hi: f64,
    jitter: Option<&mut Rng>,
) -> Vec<f64> {
    assert_eq!(coarse_ts.len(), weights.len(), "one weight per coarse sample");
    assert!(m >= 1, "need at least one fine sample");
    assert!(!coarse_ts.is_empty(), "need coarse samples");
    assert!(weights.iter().all(|&w| w >= 0.0), "weights must be non-negative");
    let n = coarse_ts.len();
    let mut edges = Vec::with_capacity(n + 1);
    edges.push(lo);
    for i in 1..n {
        edges.push(0.5 * (coarse_ts[i - 1] + coarse_ts[i]));
    }
    edges.push(hi);
    let total: f64 = weights.iter().sum();
    let us: Vec<f64> = match jitter {
        None => (0..m).map(|k| (k as f64 + 0.5) / m as f64).collect(),
        Some(rng) => (0..m).map(|k| (k as f64 + rng.random::<f64>()) / m as f64).collect(),
    };
    if !(total > 1e-12) {
        return us.iter().map(|u| lo + u * (hi - lo)).collect();
    }
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in weights {
        acc += w / total;
        cdf.push(acc);
    }
    cdf[n] = 1.0;
    let mut out = Vec::with_capacity(m);
    let mut bin = 0;
    for u in us {
        while bin + 1 < n && cdf[bin + 1] <= u {
            bin += 1;
        }
        // Skip empty bins that the cumulative sum would otherwise select.
        while weights[bin] == 0.0 && bin + 1 < n {
            bin += 1;
        }
        let frac = ((u - cdf[bin]) / (cdf[bin + 1] - cdf[bin])).clamp(0.0, 1.0);
        out.push(edges[bin] + frac * (edges[bin + 1] - edges[bin]));
    }
    out
}

/// Root of the first positive-to-negative sign change, by linear
/// interpolation of the two bracketing samples. A sample with exactly zero
/// distance found first is returned as is.
pub fn accurate_sample(ts: &[f64], ss: &[f64]) -> Option<f64> {
    assert_eq!(ts.len(), ss.len(), "one distance per sample");
    assert!(ts.windows(2).all(|w| w[0] <= w[1]), "samples must be sorted ascending");
    for i in 0..ts.len() {
        if ss[i] == 0.0 {
            return Some(ts[i]);
        }
        if i + 1 < ts.len() && ss[i] > 0.0 && ss[i + 1] < 0.0 {
            let (t1, t2, s1, s2) = (ts[i], ts[i + 1], ss[i], ss[i + 1]);
            return Some(-(t2 - t1) / (s2 - s1) * s1 + t1);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn coarse_examples() {
        let v = coarse_sample(2.0, 0.3, 3, 0.0, None);
        assert_eq!(v.len(), 3);
        for (a, b) in v.iter().zip([1.7, 2.0, 2.3]) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut rng = stream(1, &[]);
        for k in 0..200 {
            let td = k as f64 * 0.013;
            let v = coarse_sample(td, 0.25, 7, 0.5, Some(&mut rng));
            assert!(v.windows(2).all(|w| w[0] <= w[1]));
            assert!(v.iter().all(|&t| t >= (td - 0.25).max(0.5) && t <= (td + 0.25).max(0.5)));
        }
    }

    #[test]
    fn fine_concentrated_weight() {
        let ts = [1.0, 1.1, 1.2, 1.3];
        let v = fine_sample(&ts, &[0.0, 0.0, 1.0, 0.0], 50, 0.95, 1.35, None);
        assert!(v.iter().all(|&t| (1.15..=1.25).contains(&t)), "{v:?}");
        let mut rng = stream(2, &[]);
        let v = fine_sample(&ts, &[0.0, 0.0, 1.0, 0.0], 50, 0.95, 1.35, Some(&mut rng));
        assert!(v.iter().all(|&t| (1.15..=1.25).contains(&t)), "{v:?}");
    }

    #[test]
    fn fine_zero_weights_fall_back_to_uniform() {
        let v = fine_sample(&[0.0, 1.0], &[0.0, 0.0], 4, 0.0, 1.0, None);
        assert_eq!(v, vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn fine_uniform_weights_pass_chi_squared() {
        // Equal weights on equal bins is the uniform density on [0, 1].
        let ts: Vec<f64> = (0..10).map(|i| (i as f64 + 0.5) / 10.0).collect();
        let mut rng = stream(3, &[]);
        let mut counts = [0usize; 20];
        for _ in 0..100 {
            for t in fine_sample(&ts, &[1.0; 10], 100, 0.0, 1.0, Some(&mut rng)) {
                counts[((t * 20.0) as usize).min(19)] += 1;
            }
        }
        let expected = 10_000.0 / 20.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 99.9th percentile of chi-squared with 19 degrees of freedom.
        assert!(chi2 < 43.82, "chi2 = {chi2}");
    }

    #[test]
    fn accurate_examples() {
        let t = accurate_sample(&[1.0, 1.5], &[0.2, -0.3]).unwrap();
        assert!((t - 1.2).abs() < 1e-15);
        // s(t) = |3 - t| - 1 on the unit sphere ray from (0, 0, 3).
        let s = |t: f64| (3.0 - t).abs() - 1.0;
        let t = accurate_sample(&[1.9, 2.1], &[s(1.9), s(2.1)]).unwrap();
        assert!((t - 2.0).abs() < 1e-12);
        assert_eq!(accurate_sample(&[1.0, 2.0, 3.0], &[0.3, 0.1, 0.2]), None);
        assert_eq!(accurate_sample(&[1.0, 2.0, 3.0], &[0.3, 0.0, -0.2]), Some(2.0));
        // Negative-to-positive changes do not count.
        assert_eq!(accurate_sample(&[1.0, 2.0], &[-0.1, 0.1]), None);
    }

    #[test]
    #[should_panic(expected = "sorted")]
    fn accurate_rejects_unsorted() {
        accurate_sample(&[2.0, 1.0], &[0.1, -0.1]);
    }

    proptest::proptest! {
        #[test]
        fn accurate_is_exact_on_affine_profiles(
            root in -3.0f64..3.0,
            slope in 0.05f64..20.0,
            lo in -4.0f64..-3.0,
            n in 2usize..40,
        ) {
            let ts = uniform_samples(lo, 4.0, n, None);
            let ss: Vec<f64> = ts.iter().map(|t| -slope * (t - root)).collect();
            let t = accurate_sample(&ts, &ss).unwrap();
            proptest::prop_assert!((t - root).abs() < 1e-12, "{} vs {}", t, root);
        }
    }
}
