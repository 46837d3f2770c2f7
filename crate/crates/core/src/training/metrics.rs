//! Shape metrics for rendered silhouettes.

use crate::geometry::CameraPose;
use crate::network::{ColorCode, GeneratorNetwork, NeuralField, ShapeCode};
use crate::render::{render, RenderConfig};

/// Isoperimetric ratio `4 pi A / P^2` of the region where `values >= 0.5`
/// on a `size x size` grid.
///
/// `A` counts pixels inside; `P` is the length of the marching-squares
/// contour through the pixel centers, which tracks the true boundary far
/// better than the staircase of pixel edges. A disk scores close to 1,
/// elongated or fragmented regions score lower, and an empty region
/// scores 0.
pub fn roundness(values: &[f64], size: usize) -> f64 {
    assert_eq!(values.len(), size * size, "grid size mismatch");
    let level = 0.5;
    // Pad with a ring of outside values so contours close.
    let n = size + 2;
    let at = |x: usize, y: usize| -> f64 {
        if x == 0 || y == 0 || x == n - 1 || y == n - 1 {
            0.0
        } else {
            values[(y - 1) * size + (x - 1)]
        }
    };
    let area = values.iter().filter(|&&v| v >= level).count() as f64;
    if area == 0.0 {
        return 0.0;
    }
    let mut perimeter = 0.0;
    for y in 0..n - 1 {
        for x in 0..n - 1 {
            // Corners counter-clockwise from top-left.
            let c = [(x, y), (x + 1, y), (x + 1, y + 1), (x, y + 1)];
            let v = c.map(|(i, j)| at(i, j));
            let mut crossings = Vec::with_capacity(4);
            for k in 0..4 {
                let (a, b) = (k, (k + 1) % 4);
                if (v[a] >= level) != (v[b] >= level) {
                    let t = (level - v[a]) / (v[b] - v[a]);
                    let (pa, pb) = (c[a], c[b]);
                    crossings.push((
                        pa.0 as f64 + t * (pb.0 as f64 - pa.0 as f64),
                        pa.1 as f64 + t * (pb.1 as f64 - pa.1 as f64),
                    ));
                }
            }
            let seg = |p: (f64, f64), q: (f64, f64)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
            match crossings.len() {
                2 => perimeter += seg(crossings[0], crossings[1]),
                // Saddle: pair consecutive crossings.
                4 => perimeter += seg(crossings[0], crossings[1]) + seg(crossings[2], crossings[3]),
                _ => {}
            }
        }
    }
    (4.0 * std::f64::consts::PI * area / (perimeter * perimeter)).min(1.0)
}

/// Mean silhouette roundness of the generator over the given codes, each
/// rendered from `pose` at `size x size`, using the sphere-tracing hit mask.
pub fn mean_roundness(
    net: &GeneratorNetwork,
    codes: &[(ShapeCode, ColorCode)],
    pose: &CameraPose,
    size: usize,
    cfg: &RenderConfig,
) -> crate::error::Result<f64> {
    let cfg = RenderConfig {
        normals: false,
        ..cfg.clone()
    };
    let mut total = 0.0;
    for (zs, zc) in codes {
        let out = render(&NeuralField::new(net, zs, zc), pose, size, size, &cfg)?;
        let mask: Vec<f64> = out.hit.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect();
        total += roundness(&mask, size);
    }
    Ok(total / codes.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(size: usize, cx: f64, cy: f64, r: f64) -> Vec<f64> {
        (0..size * size)
            .map(|k| {
                let (x, y) = ((k % size) as f64 + 0.5, (k / size) as f64 + 0.5);
                if (x - cx).hypot(y - cy) <= r {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    #[test]
    fn disks_are_round_and_bars_are_not() {
        // Binary masks cut corners at 45 degrees, inflating P by about 5%.
        let d = roundness(&disk(64, 32.0, 31.0, 20.0), 64);
        assert!(d > 0.85, "{d}");
        let bar: Vec<f64> = (0..64 * 64)
            .map(|k| if (k / 64) >= 30 && (k / 64) < 34 && (k % 64) >= 4 && (k % 64) < 60 { 1.0 } else { 0.0 })
            .collect();
        let b = roundness(&bar, 64);
        assert!(b < 0.35, "{b}");
        let two: Vec<f64> = disk(64, 16.0, 32.0, 10.0)
            .iter()
            .zip(disk(64, 48.0, 32.0, 10.0))
            .map(|(a, b)| a.max(b))
            .collect();
        assert!(roundness(&two, 64) < 0.6);
        assert_eq!(roundness(&[0.0; 16], 4), 0.0);
    }

    #[test]
    fn roundness_stable_across_sizes() {
        for r in [6.0, 12.0, 25.0] {
            let v = roundness(&disk(64, 32.0, 32.0, r), 64);
            assert!(v > 0.85, "radius {r}: {v}");
        }
    }
}
