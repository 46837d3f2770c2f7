//! The gradient-free rendering pipeline: plan samples for a batch of rays,
//! then composite them into images.

use rayon::prelude::*;

use super::composite::{composite, weights};
use super::march::{Marcher, TraceResult};
use super::opacity::map_opacity;
use super::sampling::{accurate_sample, coarse_sample, fine_sample, uniform_samples};
use super::{RenderConfig, SamplingStrategy};
use crate::error::Result;
use crate::geometry::{generate_rays, CameraPose, Ray, Vec3};
use crate::rng::stream;
use crate::sdf::SdfField;

/// Rays handled together by one worker; batches network queries.
const CHUNK: usize = 128;

/// Everything the pipeline decided and evaluated for one ray.
#[derive(Debug, Clone, Default)]
pub struct RaySamples {
    /// Sample positions, ascending.
    pub ts: Vec<f64>,
    /// Signed distance at each sample.
    pub ss: Vec<f64>,
    /// Color at each sample (empty when planned without color).
    pub colors: Vec<[f64; 3]>,
    /// Marching outcome (absent for untraced rendering).
    pub trace: Option<TraceResult>,
    /// Interpolated surface root, when the accurate sample was taken.
    pub surface_t: Option<f64>,
    /// Field evaluations spent on this ray, marching included.
    pub queries: u32,
}

impl RaySamples {
    pub fn is_hit(&self) -> bool {
        matches!(self.trace, Some(TraceResult::Hit { .. }))
    }

    fn insert(&mut self, t: f64, s: f64, color: Option<[f64; 3]>) {
        let i = self.ts.partition_point(|&x| x <= t);
        self.ts.insert(i, t);
        self.ss.insert(i, s);
        if let Some(c) = color {
            self.colors.insert(i, c);
        }
    }
}

/// Evaluates the field at `(ray, t)` pairs in one batch.
fn evaluate(
    field: &dyn SdfField,
    rays: &[Ray],
    jobs: &[(usize, f64)],
    with_color: bool,
) -> (Vec<f64>, Vec<[f64; 3]>) {
    let points: Vec<Vec3> = jobs.iter().map(|&(r, t)| rays[r].at(t)).collect();
    let mut s = vec![0.0; jobs.len()];
    if with_color {
        let dirs: Vec<Vec3> = jobs.iter().map(|&(r, _)| rays[r].direction).collect();
        let mut c = vec![[0.0; 3]; jobs.len()];
        if !jobs.is_empty() {
            field.shade_batch(&points, &dirs, &mut s, &mut c);
        }
        (s, c)
    } else {
        if !jobs.is_empty() {
            field.distance_batch(&points, &mut s);
        }
        (s, Vec::new())
    }
}

/// Plans (and evaluates) the samples of a batch of rays on the calling
/// thread. `pixel_ids` key the per-ray jitter streams.
pub fn plan_rays(
    field: &dyn SdfField,
    rays: &[Ray],
    pixel_ids: &[u64],
    near: f64,
    far: f64,
    cfg: &RenderConfig,
    with_color: bool,
) -> Vec<RaySamples> {
    assert_eq!(rays.len(), pixel_ids.len(), "one pixel id per ray");
    let n = rays.len();
    let mut out = vec![RaySamples::default(); n];
    let mut rngs: Vec<_> = pixel_ids
        .iter()
        .map(|&p| cfg.jitter.then(|| stream(cfg.seed, &[0x7261_7973, p])))
        .collect();

    // Sampling band per ray, or none for rays that skip sampling.
    let mut bands: Vec<Option<(f64, f64, Vec<f64>)>> = vec![None; n];
    if cfg.traced {
        let mut marchers: Vec<Marcher> = (0..n)
            .map(|_| Marcher::new(near, far, cfg.march_eps, cfg.max_march_iters))
            .collect();
        loop {
            let active: Vec<usize> = (0..n).filter(|&i| marchers[i].done.is_none()).collect();
            if active.is_empty() {
                break;
            }
            let jobs: Vec<(usize, f64)> = active.iter().map(|&i| (i, marchers[i].t)).collect();
            let (s, _) = evaluate(field, rays, &jobs, false);
            for (k, &i) in active.iter().enumerate() {
                marchers[i].advance(s[k]);
            }
        }
        for i in 0..n {
            let trace = marchers[i].done.expect("marching finished");
            out[i].trace = Some(trace);
            out[i].queries = marchers[i].evals();
            let center = match trace {
                TraceResult::Hit { t, .. } => Some(t),
                TraceResult::Miss { t_closest, min_s, .. }
                    if cfg.near_miss > 0.0 && min_s < cfg.near_miss / cfg.beta =>
                {
                    Some(t_closest)
                }
                TraceResult::Miss { .. } => None,
            };
            if let Some(c) = center {
                let ts = coarse_sample(c, cfg.delta, cfg.n_coarse, near, rngs[i].as_mut());
                let (lo, hi) = super::sampling::band(c, cfg.delta, near);
                bands[i] = Some((lo, hi, ts));
            }
        }
    } else {
        for i in 0..n {
            let ts = uniform_samples(near, far, cfg.n_coarse, rngs[i].as_mut());
            bands[i] = Some((near, far, ts));
        }
    }

    let mut jobs = Vec::new();
    for (i, b) in bands.iter().enumerate() {
        if let Some((_, _, ts)) = b {
            jobs.extend(ts.iter().map(|&t| (i, t)));
        }
    }
    let (s, c) = evaluate(field, rays, &jobs, with_color);
    for (k, &(i, t)) in jobs.iter().enumerate() {
        out[i].ts.push(t);
        out[i].ss.push(s[k]);
        if with_color {
            out[i].colors.push(c[k]);
        }
        out[i].queries += 1;
    }

    let mut extra = Vec::new();
    match cfg.strategy {
        SamplingStrategy::CoarseOnly => {}
        SamplingStrategy::CoarseFine => {
            for (i, b) in bands.iter().enumerate() {
                if let Some((lo, hi, _)) = b {
                    let alphas: Vec<f64> = out[i].ss.iter().map(|&s| map_opacity(s, cfg.beta)).collect();
                    let w = weights(&alphas);
                    let fine = fine_sample(&out[i].ts, &w, cfg.n_fine, *lo, *hi, rngs[i].as_mut());
                    extra.extend(fine.into_iter().map(|t| (i, t)));
                }
            }
        }
        SamplingStrategy::CoarseAccurate => {
            for i in 0..n {
                if let Some(t) = accurate_sample(&out[i].ts, &out[i].ss) {
                    out[i].surface_t = Some(t);
                    // An exact zero among the samples is already evaluated.
                    if !out[i].ts.contains(&t) {
                        extra.push((i, t));
                    }
                }
            }
        }
    }
    let (s, c) = evaluate(field, rays, &extra, with_color);
    for (k, &(i, t)) in extra.iter().enumerate() {
        out[i].insert(t, s[k], with_color.then(|| c[k]));
        out[i].queries += 1;
    }
    out
}

/// Plans all rays in parallel chunks. Output order matches `rays`, and
/// results do not depend on the number of worker threads.
pub fn plan_rays_parallel(
    field: &dyn SdfField,
    rays: &[Ray],
    near: f64,
    far: f64,
    cfg: &RenderConfig,
    with_color: bool,
) -> Vec<RaySamples> {
    rays.par_chunks(CHUNK)
        .enumerate()
        .flat_map_iter(|(c, chunk)| {
            let ids: Vec<u64> = (0..chunk.len()).map(|k| (c * CHUNK + k) as u64).collect();
            plan_rays(field, chunk, &ids, near, far, cfg, with_color)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major pixels, top row first.
    pub rgb: Vec<[f64; 3]>,
    /// Weighted mean ray depth; `f64::INFINITY` for background pixels.
    pub depth: Vec<f64>,
    /// Unit surface normal at the depth point; zero for background.
    pub normal: Vec<[f64; 3]>,
    pub weight_sum: Vec<f64>,
    /// Whether sphere tracing converged for the pixel's ray.
    pub hit: Vec<bool>,
    /// Field evaluations used to produce the image.
    pub sdf_queries: u64,
    /// Per-ray share of `sdf_queries`.
    pub ray_queries: Vec<u32>,
    /// Gradient evaluations spent on the normal image.
    pub gradient_queries: u64,
    /// Interpolated surface root per ray (coarse+accurate only).
    pub surface_t: Vec<Option<f64>>,
}

/// Renders arbitrary rays arranged as a `width x height` image.
pub fn render_rays(
    field: &dyn SdfField,
    rays: &[Ray],
    width: usize,
    height: usize,
    near: f64,
    far: f64,
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    cfg.validate()?;
    assert_eq!(rays.len(), width * height, "ray count must match the image size");
    let plans = plan_rays_parallel(field, rays, near, far, cfg, true);
    let comps: Vec<_> = plans
        .iter()
        .map(|p| {
            let alphas: Vec<f64> = p.ss.iter().map(|&s| map_opacity(s, cfg.beta)).collect();
            composite(&p.ts, &alphas, &p.colors, cfg.background)
        })
        .collect();
    let mut normal = vec![[0.0; 3]; rays.len()];
    let mut gradient_queries = 0;
    if cfg.normals {
        let idx: Vec<usize> = (0..rays.len()).filter(|&i| comps[i].depth.is_finite()).collect();
        let points: Vec<Vec3> = idx.iter().map(|&i| rays[i].at(comps[i].depth)).collect();
        let grads: Vec<Vec3> = points
            .par_chunks(CHUNK)
            .flat_map_iter(|c| field.gradient_batch(c))
            .collect();
        gradient_queries = points.len() as u64;
        for (&i, g) in idx.iter().zip(grads) {
            if g.norm() > 0.0 {
                normal[i] = g.normalized().to_array();
            }
        }
    }
    Ok(RenderOutput {
        width,
        height,
        rgb: comps.iter().map(|c| c.rgb).collect(),
        depth: comps.iter().map(|c| c.depth).collect(),
        normal,
        weight_sum: comps.iter().map(|c| c.weight_sum).collect(),
        hit: plans.iter().map(|p| p.is_hit()).collect(),
        sdf_queries: plans.iter().map(|p| p.queries as u64).sum(),
        ray_queries: plans.iter().map(|p| p.queries).collect(),
        gradient_queries,
        surface_t: plans.iter().map(|p| p.surface_t).collect(),
    })
}

/// Renders `field` from `pose`.
pub fn render(
    field: &dyn SdfField,
    pose: &CameraPose,
    width: usize,
    height: usize,
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    let grid = generate_rays(pose, width, height)?;
    let (near, far) = pose.near_far();
    render_rays(field, &grid.rays, width, height, near, far, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdf::{AnalyticScene, AnalyticSdf, SceneColor};
    use std::sync::atomic::{AtomicU64, Ordering};

    /// Wraps a field and counts every point it is asked about.
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

    fn sphere(r: f64) -> AnalyticScene {
        AnalyticScene::new(AnalyticSdf::sphere(Vec3::ZERO, r), SceneColor::default())
    }

    /// Closed-form first intersection of a ray with a sphere at the origin.
    fn ray_sphere(ray: &Ray, r: f64) -> Option<f64> {
        let b = ray.origin.dot(ray.direction);
        let c = ray.origin.norm_squared() - r * r;
        let disc = b * b - c;
        (disc >= 0.0).then(|| -b - disc.sqrt()).filter(|&t| t >= 0.0)
    }

    #[test]
    fn sphere_silhouette_and_depth_match_closed_form() {
        let scene = sphere(1.0);
        let pose = CameraPose::new(0.3, 1.1, 3.0);
        // Opacity is per sample, so the weighted depth is pulled toward the
        // camera by the samples just in front of the surface; a sparser band
        // keeps that bias small.
        let cfg = RenderConfig {
            strategy: SamplingStrategy::CoarseAccurate,
            beta: 100.0,
            n_coarse: 4,
            delta: 0.3,
            ..RenderConfig::default()
        };
        let out = render(&scene, &pose, 64, 64, &cfg).unwrap();
        let rays = generate_rays(&pose, 64, 64).unwrap().rays;
        let truth: Vec<Option<f64>> = rays.iter().map(|r| ray_sphere(r, 1.0)).collect();
        let inside = |i: usize| truth[i].is_some();
        let mut sq = 0.0;
        let mut count = 0;
        for row in 0..64 {
            for col in 0..64 {
                let i = row * 64 + col;
                let boundary = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|(dr, dc)| {
                    let (r2, c2) = (row as i64 + dr, col as i64 + dc);
                    (0..64).contains(&r2) && (0..64).contains(&c2) && inside((r2 * 64 + c2) as usize) != inside(i)
                });
                if !boundary {
                    assert_eq!(out.hit[i], inside(i), "pixel {row},{col}");
                    if let Some(t) = truth[i] {
                        sq += (out.depth[i] - t).powi(2);
                        count += 1;
                    }
                }
            }
        }
        let rmse = (sq / count as f64).sqrt();
        assert!(rmse < 1e-2, "depth rmse {rmse}");
    }

    #[test]
    fn query_counts_are_exact_and_bounded() {
        let scene = sphere(0.5);
        let counting = Counting {
            inner: &scene,
            points: AtomicU64::new(0),
        };
        let pose = CameraPose::new(1.0, 0.7, 1.0);
        for strategy in SamplingStrategy::ALL {
            let cfg = RenderConfig {
                strategy,
                normals: false,
                ..RenderConfig::default()
            };
            counting.points.store(0, Ordering::Relaxed);
            let out = render(&counting, &pose, 24, 24, &cfg).unwrap();
            assert_eq!(out.sdf_queries, counting.points.load(Ordering::Relaxed));
            assert_eq!(out.sdf_queries, out.ray_queries.iter().map(|&q| q as u64).sum::<u64>());
            if strategy == SamplingStrategy::CoarseAccurate {
                for (i, &q) in out.ray_queries.iter().enumerate() {
                    if out.hit[i] {
                        assert!(q <= 32 + 1 + cfg.max_march_iters);
                    }
                }
            }
        }
    }

    #[test]
    fn single_hit_ray_accounting() {
        // Plane z = 0 seen straight down from z = 1: the march evaluates
        // twice (s = 1, then s = 0), the band adds n and the root adds one.
        let plane = AnalyticScene::new(AnalyticSdf::plane(Vec3::Z, 0.0), SceneColor::default());
        let ray = Ray::new(Vec3::new(0.0, 0.0, 1.0), -Vec3::Z);
        let cfg = RenderConfig {
            n_coarse: 16,
            ..RenderConfig::default()
        };
        let p = plan_rays(&plane, &[ray], &[0], 0.0, 3.0, &cfg, true);
        // The band is symmetric about the hit, so the middle pair brackets
        // the root and no sample lands on it exactly.
        assert_eq!(p[0].queries, 2 + 16 + 1);
        // Marching away from the plane evaluates at t = 0, 1, 3 and then
        // leaves the far bound; a miss spends nothing else.
        let miss = Ray::new(Vec3::new(0.0, 0.0, 1.0), Vec3::Z);
        let p = plan_rays(&plane, &[miss], &[0], 0.0, 3.0, &cfg, true);
        assert_eq!(p[0].queries, 3);
        assert!(p[0].ts.is_empty());
    }

    #[test]
    fn all_miss_image_is_background() {
        let scene = sphere(0.1);
        let pose = CameraPose::new(0.0, 1.0, 1.0);
        let mut cfg = RenderConfig::default();
        cfg.background = [0.2, 0.3, 0.4];
        // Look away from the object.
        let pose = CameraPose {
            look_at: Vec3::new(0.0, 0.0, 5.0),
            ..pose
        };
        let out = render(&scene, &pose, 8, 8, &cfg).unwrap();
        assert!(out.rgb.iter().all(|c| *c == [0.2, 0.3, 0.4]));
        assert!(out.depth.iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let scene = sphere(0.5);
        let pose = CameraPose::new(0.4, 0.9, 1.0);
        let cfg = RenderConfig {
            strategy: SamplingStrategy::CoarseFine,
            jitter: true,
            seed: 9,
            ..RenderConfig::default()
        };
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| render(&scene, &pose, 40, 40, &cfg).unwrap())
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.ray_queries, b.ray_queries);
    }

    #[test]
    fn untraced_rendering_spends_fixed_budget() {
        let scene = sphere(0.5);
        let pose = CameraPose::new(0.4, 0.9, 1.0);
        let cfg = RenderConfig {
            strategy: SamplingStrategy::CoarseFine,
            traced: false,
            n_coarse: 32,
            n_fine: 32,
            normals: false,
            ..RenderConfig::default()
        };
        let out = render(&scene, &pose, 10, 10, &cfg).unwrap();
        assert!(out.ray_queries.iter().all(|&q| q == 64));
    }
}
