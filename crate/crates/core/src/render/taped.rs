//! Rendering recorded on a tape so image losses can be differentiated with
//! respect to the generator parameters and the opacity sharpness.
//!
//! Sample positions are chosen without gradients (marching and sampling use
//! the fast network path); the tape sees only the network evaluations at the
//! chosen points, the opacity mapping and the compositing.

use std::sync::Arc;

use super::pipeline::plan_rays_parallel;
use super::RenderConfig;
use crate::autodiff::{Tape, Tensor, Var};
use crate::geometry::{Ray, Vec3};
use crate::network::{ColorCode, GeneratorNetwork, NeuralField, ShapeCode, TapedParams};

#[derive(Debug, Clone)]
pub struct TapedImage {
    /// `3 x n_rays` colors, one column per ray in input order.
    pub rgb: Var,
    /// Located surface points (interpolated roots, else march hits), for
    /// the normal regularizer.
    pub surface_points: Vec<Vec3>,
    pub weight_sum: Vec<f64>,
    /// Field evaluations spent planning the samples.
    pub plan_queries: u64,
    /// Points evaluated on the tape.
    pub taped_points: usize,
}

/// `4 sigmoid(beta s) (1 - sigmoid(beta s))` on the tape; `beta` is `1 x 1`.
pub fn opacity_taped(tape: &mut Tape, s: Var, beta: Var) -> Var {
    let x = tape.mul_scalar(s, beta);
    let sig = tape.sigmoid(x);
    let neg = tape.neg(sig);
    let one_minus = tape.add_scalar(neg, 1.0);
    let p = tape.mul(sig, one_minus);
    tape.scale(p, 4.0)
}

/// Renders `rays` with the generator on `tape`. `cfg.beta` must equal the
/// value of `beta`; it steers the gradient-free fine sampling.
#[allow(clippy::too_many_arguments)]
pub fn render_taped(
    tape: &mut Tape,
    net: &GeneratorNetwork,
    params: &TapedParams,
    beta: Var,
    rays: &[Ray],
    near: f64,
    far: f64,
    cfg: &RenderConfig,
    zs: &ShapeCode,
    zc: &ColorCode,
) -> TapedImage {
    debug_assert_eq!(tape.scalar(beta), cfg.beta, "cfg.beta must match the taped beta");
    let field = NeuralField::new(net, zs, zc);
    let plans = plan_rays_parallel(&field, rays, near, far, cfg, false);
    let mut points = Vec::new();
    let mut dirs = Vec::new();
    let mut segments = Vec::with_capacity(rays.len() + 1);
    let mut surface_points = Vec::new();
    segments.push(0);
    for (ray, p) in rays.iter().zip(&plans) {
        for &t in &p.ts {
            points.push(ray.at(t));
            dirs.push(ray.direction);
        }
        segments.push(points.len());
        if let Some(t) = p.surface_t.or_else(|| p.trace.and_then(|tr| tr.hit_t())) {
            surface_points.push(ray.at(t));
        }
    }
    let plan_queries = plans.iter().map(|p| p.queries as u64).sum();
    let n_rays = rays.len();
    if points.is_empty() {
        let bg = cfg.background;
        let data = (0..3).flat_map(|ch| std::iter::repeat_n(bg[ch], n_rays)).collect();
        let rgb = tape.constant(Tensor::from_vec(3, n_rays, data));
        return TapedImage {
            rgb,
            surface_points,
            weight_sum: vec![0.0; n_rays],
            plan_queries,
            taped_points: 0,
        };
    }
    let out = net.forward_taped(tape, params, &points, Some(&dirs), zs, zc);
    let alpha = opacity_taped(tape, out.sdf, beta);
    let color = out.color.expect("directions were supplied");
    let weight_sum = {
        let a = &tape.value(alpha).data;
        (0..n_rays)
            .map(|r| {
                let mut trans = 1.0;
                for &x in &a[segments[r]..segments[r + 1]] {
                    trans *= 1.0 - x;
                }
                1.0 - trans
            })
            .collect()
    };
    let taped_points = points.len();
    let rgb = tape.composite(alpha, color, Arc::new(segments), cfg.background);
    TapedImage {
        rgb,
        surface_points,
        weight_sum,
        plan_queries,
        taped_points,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::directional_check;
    use crate::geometry::{generate_rays, CameraPose};
    use crate::network::NetConfig;
    use crate::render::{render_rays, SamplingStrategy};
    use crate::rng::stream;
    use rand_distr::{Distribution, StandardNormal};

    fn setup() -> (GeneratorNetwork, ShapeCode, ColorCode) {
        let cfg = NetConfig {
            init_code_scale: 0.2,
            ..NetConfig::small()
        };
        let net = GeneratorNetwork::new(cfg, 5).unwrap();
        let mut rng = stream(6, &[]);
        let zs = ShapeCode::sample(16, &mut rng);
        let zc = ColorCode::sample(8, &mut rng);
        (net, zs, zc)
    }

    #[test]
    fn taped_image_matches_plain_render() {
        let (net, zs, zc) = setup();
        let pose = CameraPose::new(0.5, 1.0, 1.0);
        let rays = generate_rays(&pose, 12, 12).unwrap().rays;
        let (near, far) = pose.near_far();
        for strategy in SamplingStrategy::ALL {
            let cfg = RenderConfig {
                strategy,
                beta: 40.0,
                n_coarse: 8,
                n_fine: 8,
                normals: false,
                ..RenderConfig::default()
            };
            let field = NeuralField::new(&net, &zs, &zc);
            let plain = render_rays(&field, &rays, 12, 12, near, far, &cfg).unwrap();
            let mut tape = Tape::new();
            let p = net.register(&mut tape, true);
            let beta = tape.param(Tensor::scalar(40.0));
            let img = render_taped(&mut tape, &net, &p, beta, &rays, near, far, &cfg, &zs, &zc);
            let v = tape.value(img.rgb);
            for i in 0..rays.len() {
                for ch in 0..3 {
                    assert!((v.data[ch * rays.len() + i] - plain.rgb[i][ch]).abs() < 1e-10);
                }
                assert!((img.weight_sum[i] - plain.weight_sum[i]).abs() < 1e-10);
            }
            assert!(plain.hit.iter().any(|&h| h));
        }
    }

    #[test]
    fn render_loss_gradient_matches_finite_differences() {
        let (net, zs, zc) = setup();
        let pose = CameraPose::new(0.5, 1.0, 1.0);
        let rays = generate_rays(&pose, 4, 4).unwrap().rays;
        let (near, far) = pose.near_far();
        let cfg = RenderConfig {
            strategy: SamplingStrategy::CoarseAccurate,
            beta: 30.0,
            n_coarse: 8,
            normals: false,
            ..RenderConfig::default()
        };
        let target: Vec<f64> = (0..48).map(|i| (i as f64 * 0.37).sin() * 0.5 + 0.5).collect();
        // Sample positions are frozen so the loss is a smooth function of
        // the parameters; finite differences must use the same positions.
        let field = NeuralField::new(&net, &zs, &zc);
        let plans = super::plan_rays_parallel(&field, &rays, near, far, &cfg, false);
        let loss_with = |n: &GeneratorNetwork, tape: &mut Tape, p: &TapedParams| {
            let mut points = Vec::new();
            let mut dirs = Vec::new();
            let mut seg = vec![0];
            for (ray, pl) in rays.iter().zip(&plans) {
                for &t in &pl.ts {
                    points.push(ray.at(t));
                    dirs.push(ray.direction);
                }
                seg.push(points.len());
            }
            let out = n.forward_taped(tape, p, &points, Some(&dirs), &zs, &zc);
            let beta = tape.constant(Tensor::scalar(cfg.beta));
            let a = opacity_taped(tape, out.sdf, beta);
            let img = tape.composite(a, out.color.unwrap(), Arc::new(seg), cfg.background);
            let t = tape.constant(Tensor::from_vec(3, 16, target.clone()));
            let d = tape.sub(img, t);
            let d = tape.square(d);
            tape.mean(d)
        };
        let mut tape = Tape::new();
        let p = net.register(&mut tape, true);
        let l = loss_with(&net, &mut tape, &p);
        let grad = net.gather_grads(&p, &tape.backward(l));
        assert!(grad.iter().any(|&g| g != 0.0));
        let f = |q: &[f64]| {
            let n = GeneratorNetwork::from_params(net.config().clone(), q.to_vec()).unwrap();
            let mut tape = Tape::new();
            let p = n.register(&mut tape, false);
            let l = loss_with(&n, &mut tape, &p);
            tape.scalar(l)
        };
        for k in 0..10 {
            let mut r = stream(11, &[k]);
            let dir: Vec<f64> = (0..grad.len()).map(|_| StandardNormal.sample(&mut r)).collect();
            let err = directional_check(f, &grad, net.params(), &dir, 1e-6);
            assert!(err < 1e-3, "probe {k}: {err}");
        }
    }
}
