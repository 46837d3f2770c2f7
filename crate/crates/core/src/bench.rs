//! Sampling-strategy comparisons: image error against a dense reference,
//! exact query counts and frame throughput.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::geometry::{generate_rays, CameraPose};
use crate::render::{render, render_rays, sphere_trace, RenderConfig, RenderOutput, SamplingStrategy, TraceResult};
use crate::sdf::SdfField;

/// Dense uniform samples over the whole near-far range of every ray, no
/// marching. `beta` and `background` come from `base`.
pub fn reference_render(
    field: &dyn SdfField,
    pose: &CameraPose,
    size: usize,
    n_dense: usize,
    base: &RenderConfig,
) -> Result<RenderOutput> {
    if n_dense < 256 {
        return Err(Error::InvalidConfig(format!("reference needs n_dense >= 256, got {n_dense}")));
    }
    let cfg = RenderConfig {
        strategy: SamplingStrategy::CoarseOnly,
        n_coarse: n_dense,
        traced: false,
        jitter: false,
        normals: false,
        ..base.clone()
    };
    render(field, pose, size, size, &cfg)
}

/// Root-mean-square difference over all channels of two images.
pub fn rgb_rmse(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    assert_eq!(a.len(), b.len(), "image sizes differ");
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (0..3).map(|c| (x[c] - y[c]).powi(2)).sum::<f64>())
        .sum();
    (sum / (3 * a.len()).max(1) as f64).sqrt()
}

/// First-surface depth per pixel from a tight sphere trace, `None` on miss.
pub fn true_depths(field: &dyn SdfField, pose: &CameraPose, size: usize) -> Result<Vec<Option<f64>>> {
    let grid = generate_rays(pose, size, size)?;
    let (near, far) = pose.near_far();
    grid.rays
        .iter()
        .map(|r| {
            Ok(match sphere_trace(field, r, near, far, 1e-7, 10_000)?.0 {
                TraceResult::Hit { t, .. } => Some(t),
                TraceResult::Miss { .. } => None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub size: usize,
    pub n_dense: usize,
    /// Timed frames per strategy (cycling through the poses).
    pub frames: usize,
    pub warmup: usize,
    /// Worker threads for the timed renders; recorded in the report.
    pub threads: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            size: 128,
            n_dense: 512,
            frames: 20,
            warmup: 2,
            threads: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub label: String,
    pub strategy: SamplingStrategy,
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Mean field evaluations per ray, from the renderer's counter.
    pub queries_per_ray: f64,
    /// Total field evaluations over one pass of all poses.
    pub total_queries: u64,
    pub frame_seconds: f64,
    pub fps: f64,
    /// Mean RGB RMSE against the dense reference over the poses.
    pub rmse: f64,
    /// Mean |depth - true first-surface depth| over pixels hit in both.
    pub depth_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub size: usize,
    pub threads: usize,
    pub rows: Vec<BenchRow>,
}

pub const BENCH_CSV_HEADER: &str =
    "label,strategy,n_coarse,n_fine,queries_per_ray,total_queries,frame_seconds,fps,rmse,depth_error";

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{BENCH_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.label,
                r.strategy,
                r.n_coarse,
                r.n_fine,
                r.queries_per_ray,
                r.total_queries,
                r.frame_seconds,
                r.fps,
                r.rmse,
                r.depth_error
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{}x{} frames, {} threads\n", self.size, self.size, self.threads);
        let _ = writeln!(s, "{:<24} {:>10} {:>10} {:>10} {:>10}", "strategy", "queries", "fps", "rmse", "depth err");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:>10.2} {:>10.2} {:>10.5} {:>10.5}",
                r.label, r.queries_per_ray, r.fps, r.rmse, r.depth_error
            );
        }
        s
    }

    pub fn row(&self, label: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Short label such as `coarse+accurate(8+1)`.
pub fn strategy_label(cfg: &RenderConfig) -> String {
    let extra = match cfg.strategy {
        SamplingStrategy::CoarseOnly => 0,
        SamplingStrategy::CoarseFine => cfg.n_fine,
        SamplingStrategy::CoarseAccurate => 1,
    };
    format!("{}({}+{})", cfg.strategy, cfg.n_coarse, extra)
}

/// Renders every pose with every config, scoring against the dense
/// reference, then times `frames` renders per config on a pool of
/// `threads` workers. All configs must share `beta`.
pub fn compare_strategies(
    field: &dyn SdfField,
    poses: &[CameraPose],
    configs: &[RenderConfig],
    opts: &BenchOptions,
) -> Result<BenchReport> {
    let Some(first) = configs.first() else {
        return Err(Error::InvalidConfig("no strategies to compare".into()));
    };
    if poses.is_empty() || opts.frames == 0 || opts.threads == 0 {
        return Err(Error::InvalidConfig("bench needs poses, frames >= 1 and threads >= 1".into()));
    }
    if configs.iter().any(|c| c.beta != first.beta) {
        return Err(Error::InvalidConfig("all strategies must share beta".into()));
    }
    let size = opts.size;
    let mut refs = Vec::with_capacity(poses.len());
    let mut truths = Vec::with_capacity(poses.len());
    for p in poses {
        refs.push(reference_render(field, p, size, opts.n_dense, first)?);
        truths.push(true_depths(field, p, size)?);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;

    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let cfg = RenderConfig {
            normals: false,
            ..cfg.clone()
        };
        let (mut rmse, mut depth_error, mut total_queries) = (0.0, 0.0, 0u64);
        for ((p, r), truth) in poses.iter().zip(&refs).zip(&truths) {
            let out = render(field, p, size, size, &cfg)?;
            rmse += rgb_rmse(&out.rgb, &r.rgb);
            depth_error += mean_depth_error(&out.depth, truth);
            total_queries += out.sdf_queries;
        }
        let n = poses.len() as f64;
        let frame_seconds = pool.install(|| -> Result<f64> {
            for k in 0..opts.warmup {
                render(field, &poses[k % poses.len()], size, size, &cfg)?;
            }
            let start = Instant::now();
            for k in 0..opts.frames {
                render(field, &poses[k % poses.len()], size, size, &cfg)?;
            }
            Ok(start.elapsed().as_secs_f64() / opts.frames as f64)
        })?;
        rows.push(BenchRow {
            label: strategy_label(&cfg),
            strategy: cfg.strategy,
            n_coarse: cfg.n_coarse,
            n_fine: if cfg.strategy == SamplingStrategy::CoarseFine { cfg.n_fine } else { 0 },
            queries_per_ray: total_queries as f64 / (n * (size * size) as f64),
            total_queries,
            frame_seconds,
            fps: 1.0 / frame_seconds,
            rmse: rmse / n,
            depth_error: depth_error / n,
        });
    }
    Ok(BenchReport {
        size,
        threads: opts.threads,
        rows,
    })
}

fn mean_depth_error(depth: &[f64], truth: &[Option<f64>]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (d, t) in depth.iter().zip(truth) {
        if let (true, Some(t)) = (d.is_finite(), t) {
            sum += (d - t).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Field evaluations of one render, as reported by the renderer's counter.
pub fn count_queries_audit(
    field: &dyn SdfField,
    pose: &CameraPose,
    size: usize,
    cfg: &RenderConfig,
) -> Result<u64> {
    let grid = generate_rays(pose, size, size)?;
    let (near, far) = pose.near_far();
    let cfg = RenderConfig {
        normals: false,
        ..cfg.clone()
    };
    Ok(render_rays(field, &grid.rays, size, size, near, far, &cfg)?.sdf_queries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Ray, Vec3};
    use crate::sdf::{AnalyticScene, AnalyticSdf, SceneColor};
    use std::sync::atomic::{AtomicU64, Ordering};

    struct Counting<'a> {
        inner: &'a dyn SdfField,
        points: AtomicU64,
    }

    impl SdfField for Counting<'_> {
        fn distance_batch(&self, points: &[Vec3], out: &mut [f64]) {
            self.points.fetch_add(points.len() as u64, Ordering::Relaxed);
            self.inner.distance_batch(points, out)
        }
        fn shade_batch(&self, p: &[Vec3], d: &[Vec3], s: &mut [f64], c: &mut [[f64; 3]]) {
            self.points.fetch_add(p.len() as u64, Ordering::Relaxed);
            self.inner.shade_batch(p, d, s, c)
        }
        fn gradient(&self, p: Vec3) -> Vec3 {
            self.inner.gradient(p)
        }
    }

    fn sphere() -> AnalyticScene {
        AnalyticScene::new(AnalyticSdf::sphere(Vec3::ZERO, 0.5), SceneColor::default())
    }

    fn pose() -> CameraPose {
        CameraPose::new(0.4, 1.2, 1.0)
    }

    fn base(beta: f64) -> RenderConfig {
        RenderConfig {
            beta,
            normals: false,
            ..RenderConfig::default()
        }
    }

    #[test]
    fn reference_is_converged_on_covered_pixels() {
        let s = sphere();
        let a = reference_render(&s, &pose(), 24, 512, &base(100.0)).unwrap();
        let b = reference_render(&s, &pose(), 24, 1024, &base(100.0)).unwrap();
        let truth = true_depths(&s, &pose(), 24).unwrap();
        let pick = |img: &RenderOutput| -> Vec<[f64; 3]> {
            img.rgb.iter().zip(&truth).filter(|(_, t)| t.is_some()).map(|(c, _)| *c).collect()
        };
        assert!(rgb_rmse(&pick(&a), &pick(&b)) < 1e-3);
        // Per-sample opacity is positive everywhere, so the halo outside the
        // silhouette keeps darkening as samples get denser.
        assert!(rgb_rmse(&a.rgb, &b.rgb) > 1e-3);
        let again = reference_render(&s, &pose(), 24, 512, &base(100.0)).unwrap();
        assert_eq!(a.rgb, again.rgb);
        assert!(reference_render(&s, &pose(), 24, 100, &base(100.0)).is_err());
    }

    #[test]
    fn sharp_reference_silhouette_matches_ray_sphere() {
        let s = sphere();
        let r = reference_render(&s, &pose(), 32, 1024, &base(2000.0)).unwrap();
        let grid = generate_rays(&pose(), 32, 32).unwrap();
        let closed = |ray: &Ray| {
            let b = ray.origin.dot(ray.direction);
            let disc = b * b - (ray.origin.norm_squared() - 0.25);
            disc >= 0.0
        };
        let mismatches = grid
            .rays
            .iter()
            .zip(&r.weight_sum)
            .filter(|(ray, &w)| closed(ray) != (w > 0.5))
            .count();
        // Only grazing pixels may disagree.
        assert!(mismatches <= 4, "{mismatches}");
    }

    #[test]
    fn audit_matches_instrumented_count() {
        let s = sphere();
        for strategy in SamplingStrategy::ALL {
            let cfg = RenderConfig {
                strategy,
                n_coarse: 8,
                n_fine: 8,
                ..base(100.0)
            };
            let c = Counting {
                inner: &s,
                points: AtomicU64::new(0),
            };
            let n = count_queries_audit(&c, &pose(), 16, &cfg).unwrap();
            assert_eq!(n, c.points.load(Ordering::Relaxed), "{strategy}");
        }
    }

    #[test]
    fn report_shape_and_ratio() {
        let s = AnalyticScene::new(AnalyticSdf::two_spheres(), SceneColor::default());
        let cfgs: Vec<RenderConfig> = [
            (SamplingStrategy::CoarseOnly, 8, 0),
            (SamplingStrategy::CoarseFine, 32, 32),
            (SamplingStrategy::CoarseAccurate, 32, 0),
        ]
        .iter()
        .map(|&(strategy, n_coarse, n_fine)| RenderConfig {
            strategy,
            n_coarse,
            n_fine,
            ..base(200.0)
        })
        .collect();
        let opts = BenchOptions {
            size: 16,
            n_dense: 256,
            frames: 2,
            warmup: 0,
            threads: 1,
        };
        let rep = compare_strategies(&s, &[pose()], &cfgs, &opts).unwrap();
        assert_eq!(rep.rows.len(), 3);
        assert_eq!(rep.to_csv().lines().count(), 4);
        let fine = rep.row("coarse+fine(32+32)").unwrap();
        let acc = rep.row("coarse+accurate(32+1)").unwrap();
        // Marching is shared, so the band cost alone sets the floor.
        assert!(fine.queries_per_ray > acc.queries_per_ray);
        let mismatched = vec![cfgs[0].clone(), base(50.0)];
        assert!(compare_strategies(&s, &[pose()], &mismatched, &opts).is_err());
    }
}
