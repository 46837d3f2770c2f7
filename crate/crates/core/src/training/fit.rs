//! Supervised fitting of the generator's distance field to an analytic
//! target: `mean |s_net - s_target| + lambda_eik * Eikonal` over points
//! drawn uniformly from `[-1, 1]^3`, with the shape code held at zero.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{round_to_f32, AdamState, Checkpoint, Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::losses::{eikonal_at, eikonal_taped};
use crate::network::{ColorCode, GeneratorNetwork, NetConfig, NeuralField, ShapeCode};
use crate::rng::{stream, Rng};
use crate::sdf::AnalyticSdf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub net: NetConfig,
    pub iterations: u64,
    /// Points per iteration for both terms.
    pub batch: usize,
    pub lr: f64,
    pub lambda_eikonal: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            net: NetConfig {
                hidden: 64,
                trunk_layers: 3,
                color_hidden: 16,
                pe_x: 4,
                pe_d: 2,
                z_shape: 16,
                z_color: 8,
                ..NetConfig::default()
            },
            iterations: 2000,
            batch: 512,
            lr: 1e-3,
            lambda_eikonal: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub net: GeneratorNetwork,
    pub checkpoint: Checkpoint,
    /// `(iteration, distance loss, eikonal loss)` per iteration.
    pub history: Vec<(u64, f64, f64)>,
}

fn box_points(n: usize, rng: &mut Rng) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

/// Trains a fresh generator (seeded by `cfg.seed`) to reproduce `target`.
pub fn fit_sdf(target: &AnalyticSdf, cfg: &FitConfig) -> Result<FitResult> {
    target.validate()?;
    if cfg.batch == 0 || !(cfg.lr > 0.0) || !(cfg.lambda_eikonal >= 0.0) {
        return Err(Error::InvalidConfig("fit needs batch >= 1, lr > 0 and lambda_eikonal >= 0".into()));
    }
    let mut net = GeneratorNetwork::new(cfg.net.clone(), cfg.seed)?;
    let zs = ShapeCode::zeros(cfg.net.z_shape);
    let mut adam = AdamState::new(net.params().len(), cfg.lr);
    let mut history = Vec::with_capacity(cfg.iterations as usize);
    for it in 0..cfg.iterations {
        let mut rng = stream(cfg.seed, &[0x6669_74, it]);
        let pts = box_points(cfg.batch, &mut rng);
        let eik_pts = box_points(cfg.batch, &mut rng);
        let truth: Vec<f64> = pts.iter().map(|&p| target.eval(p)).collect();

        let mut tape = Tape::new();
        let p = net.register(&mut tape, true);
        let out = net.forward_taped(&mut tape, &p, &pts, None, &zs, &ColorCode::zeros(cfg.net.z_color));
        let t = tape.constant(Tensor::row(truth));
        let d = tape.sub(out.sdf, t);
        let pos = tape.relu(d);
        let nd = tape.neg(d);
        let neg = tape.relu(nd);
        let abs = tape.add(pos, neg);
        let dist = tape.mean(abs);
        let eik = eikonal_taped(&mut tape, &net, &p, &eik_pts, &zs);
        let weighted = tape.scale(eik, cfg.lambda_eikonal);
        let loss = tape.add(dist, weighted);
        let (dv, ev) = (tape.scalar(dist), tape.scalar(eik));
        if !(dv.is_finite() && ev.is_finite()) {
            return Err(Error::Diverged {
                iteration: it,
                what: "fit loss".into(),
            });
        }
        let grads = net.gather_grads(&p, &tape.backward(loss));
        let params = net.params_mut();
        adam.step(params, &grads);
        round_to_f32(params);
        history.push((it, dv, ev));
    }
    let checkpoint = Checkpoint {
        layers: net.layer_dims().iter().map(|&(r, c)| (r as u32, c as u32)).collect(),
        params: net.params().to_vec(),
        optimizer: vec![adam],
        beta: 0.0,
        seed: cfg.seed,
        iteration: cfg.iterations,
    };
    Ok(FitResult {
        net,
        checkpoint,
        history,
    })
}

/// Mean `|s_net - s_target|` and Eikonal loss over `n` fresh uniform box
/// points (a stream disjoint from the training draws), with a zero shape
/// code.
pub fn held_out_error(net: &GeneratorNetwork, target: &AnalyticSdf, n: usize, seed: u64) -> (f64, f64) {
    let mut rng = stream(seed, &[0x6865_6c64]);
    let pts = box_points(n, &mut rng);
    let zs = ShapeCode::zeros(net.config().z_shape);
    let (s, _) = net.eval_sdf(&pts, &zs);
    let err = s.iter().zip(&pts).map(|(v, &p)| (v - target.eval(p)).abs()).sum::<f64>() / n as f64;
    let zc = ColorCode::zeros(net.config().z_color);
    let eik = eikonal_at(&NeuralField::new(net, &zs, &zc), &pts);
    (err, eik)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_fit_reduces_the_error() {
        let target = AnalyticSdf::unit_sphere();
        let cfg = FitConfig {
            iterations: 150,
            batch: 128,
            net: NetConfig::small(),
            ..FitConfig::default()
        };
        let res = fit_sdf(&target, &cfg).unwrap();
        let init = GeneratorNetwork::new(cfg.net.clone(), cfg.seed).unwrap();
        let (before, _) = held_out_error(&init, &target, 2000, 1);
        let (after, _) = held_out_error(&res.net, &target, 2000, 1);
        assert!(after < 0.5 * before, "{before} -> {after}");
        assert_eq!(res.history.len(), 150);
        assert_eq!(res.checkpoint.params, res.net.params());
        // Determinism.
        let again = fit_sdf(&target, &cfg).unwrap();
        assert_eq!(again.net.params(), res.net.params());
    }
}
