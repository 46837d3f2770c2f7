//! Training objective: non-saturating adversarial loss with an R1 penalty,
//! the Eikonal regularizer and surface-normal smoothness.
//!
//! Sign convention: every reported loss is a quantity its player minimizes.
//! With `f(u) = -log(1 + e^-u)`, the generator minimizes
//! `L_G = -mean f(D(fake))` and the discriminator minimizes
//! `L_D = -mean f(-D(fake)) - mean f(D(real)) + lambda_r1 * R1`.

pub mod discriminator;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::network::{GeneratorNetwork, ShapeCode, TapedParams};
use crate::rng::Rng;
use crate::sdf::SdfField;

pub use discriminator::{DiscParams, Discriminator};

/// `f(u) = -log(1 + e^-u)`, evaluated without overflow.
pub fn gan_f(u: f64) -> f64 {
    -crate::autodiff::tape::softplus(-u, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the Eikonal term; 0.5 in the later stages.
    pub lambda_eikonal: f64,
    /// Weight of the normal smoothness term; 1.0 once surfaces exist.
    pub lambda_normal: f64,
    /// R1 coefficient for the first stage, halved at each later stage.
    pub lambda_r1: f64,
    pub n_eik_points: usize,
    pub n_surf_points: usize,
    /// Standard deviation of the normal-loss perturbation, scene units.
    pub eps_std: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_eikonal: 0.5,
            lambda_normal: 1.0,
            lambda_r1: 10.0,
            n_eik_points: 256,
            n_surf_points: 128,
            eps_std: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.lambda_eikonal) && ok(self.lambda_normal) && ok(self.lambda_r1) && ok(self.eps_std)) {
            return Err(Error::InvalidConfig(
                "loss weights and eps_std must be finite and non-negative".into(),
            ));
        }
        if self.n_eik_points == 0 {
            return Err(Error::InvalidConfig("n_eik_points must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adversarial losses from discriminator scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanLosses {
    pub generator: f64,
    /// Without the R1 term.
    pub discriminator: f64,
}

pub fn gan_losses(real_scores: &[f64], fake_scores: &[f64]) -> GanLosses {
    assert!(!real_scores.is_empty() && !fake_scores.is_empty(), "score batches must be non-empty");
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64;
    GanLosses {
        generator: -mean(fake_scores, &|u| gan_f(u)),
        discriminator: -mean(fake_scores, &|u| gan_f(-u)) - mean(real_scores, &|u| gan_f(u)),
    }
}

/// Generator loss on the tape from `1 x B` fake scores.
pub fn generator_loss_taped(tape: &mut Tape, fake_scores: Var) -> Var {
    let neg = tape.neg(fake_scores);
    let sp = tape.softplus(neg, 1.0);
    tape.mean(sp)
}

/// Discriminator loss on the tape (without R1).
pub fn discriminator_loss_taped(tape: &mut Tape, real_scores: Var, fake_scores: Var) -> Var {
    let a = tape.softplus(fake_scores, 1.0);
    let a = tape.mean(a);
    let neg = tape.neg(real_scores);
    let b = tape.softplus(neg, 1.0);
    let b = tape.mean(b);
    tape.add(a, b)
}

/// Points for the Eikonal term: half uniform in `[-1, 1]^3`, half surface
/// points jittered by `N(0, 0.05^2)` (all uniform when `surface` is empty).
pub fn eikonal_points(n: usize, surface: &[Vec3], rng: &mut Rng) -> Vec<Vec3> {
    let jitter = Normal::new(0.0, 0.05).expect("valid std");
    let n_surf = if surface.is_empty() { 0 } else { n / 2 };
    let mut pts: Vec<Vec3> = (0..n - n_surf)
        .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    for _ in 0..n_surf {
        let p = surface[rng.random_range(0..surface.len())];
        pts.push(p + Vec3::new(jitter.sample(rng), jitter.sample(rng), jitter.sample(rng)));
    }
    pts
}

/// `mean (|grad s| - 1)^2` over the given points.
pub fn eikonal_at(field: &dyn SdfField, points: &[Vec3]) -> f64 {
    assert!(!points.is_empty(), "eikonal loss needs at least one point");
    let grads = field.gradient_batch(points);
    grads.iter().map(|g| (g.norm() - 1.0).powi(2)).sum::<f64>() / points.len() as f64
}

/// Eikonal loss with freshly sampled points.
pub fn eikonal_loss(field: &dyn SdfField, n_points: usize, surface: &[Vec3], rng: &mut Rng) -> f64 {
    eikonal_at(field, &eikonal_points(n_points, surface, rng))
}

/// Gaussian perturbations for the normal term, one per surface point.
pub fn perturb(points: &[Vec3], eps_std: f64, rng: &mut Rng) -> Vec<Vec3> {
    if eps_std == 0.0 {
        return points.to_vec();
    }
    let normal = Normal::new(0.0, eps_std).expect("eps_std is finite and non-negative");
    points
        .iter()
        .map(|&p| p + Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng)))
        .collect()
}

/// `mean |grad s(x) - grad s(x + eps)|` over surface points. An empty set
/// contributes zero.
pub fn normal_loss(field: &dyn SdfField, surface: &[Vec3], eps_std: f64, rng: &mut Rng) -> f64 {
    if surface.is_empty() {
        log::warn!("normal loss: no surface points in this batch");
        return 0.0;
    }
    let moved = perturb(surface, eps_std, rng);
    let a = field.gradient_batch(surface);
    let b = field.gradient_batch(&moved);
    a.iter().zip(&b).map(|(x, y)| (*x - *y).norm()).sum::<f64>() / surface.len() as f64
}

/// Eikonal loss of the generator, differentiable in its parameters.
pub fn eikonal_taped(
    tape: &mut Tape,
    net: &GeneratorNetwork,
    p: &TapedParams,
    points: &[Vec3],
    zs: &ShapeCode,
) -> Var {
    let g = net.sdf_grad_taped(tape, p, points, zs);
    let nrm = tape.column_norm(g);
    let d = tape.add_scalar(nrm, -1.0);
    let sq = tape.square(d);
    tape.mean(sq)
}

/// Normal smoothness of the generator between `points` and `moved`.
pub fn normal_taped(
    tape: &mut Tape,
    net: &GeneratorNetwork,
    p: &TapedParams,
    points: &[Vec3],
    moved: &[Vec3],
    zs: &ShapeCode,
) -> Var {
    if points.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let a = net.sdf_grad_taped(tape, p, points, zs);
    let b = net.sdf_grad_taped(tape, p, moved, zs);
    let d = tape.sub(a, b);
    let nrm = tape.column_norm(d);
    tape.mean(nrm)
}

/// Per-player loss terms of one iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub gan_generator: f64,
    pub gan_discriminator: f64,
    pub r1: f64,
    pub eikonal: f64,
    pub normal: f64,
}

/// Weighted objective per player.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TotalLoss {
    pub generator: f64,
    pub discriminator: f64,
}

/// Generator: `L_G + lambda_eik * eik + lambda_normal * normal`.
/// Discriminator: `L_D + lambda_r1 * R1`. Non-finite parts are reported as
/// divergence.
pub fn total_loss(parts: &LossParts, weights: &LossWeights, lambda_r1: f64, iteration: u64) -> Result<TotalLoss> {
    let named = [
        ("L_G", parts.gan_generator),
        ("L_D", parts.gan_discriminator),
        ("R1", parts.r1),
        ("Eikonal", parts.eikonal),
        ("Normal", parts.normal),
    ];
    if let Some((what, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Diverged {
            iteration,
            what: what.to_string(),
        });
    }
    Ok(TotalLoss {
        generator: parts.gan_generator
            + weights.lambda_eikonal * parts.eikonal
            + weights.lambda_normal * parts.normal,
        discriminator: parts.gan_discriminator + lambda_r1 * parts.r1,
    })
}
