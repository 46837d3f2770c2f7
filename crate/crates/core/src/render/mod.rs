//! Differentiable SDF rendering: rays, sphere tracing, sampling,
//! distance-to-opacity mapping and compositing.

pub mod composite;
pub mod io;
pub mod march;
pub mod opacity;
pub mod pipeline;
pub mod sampling;
pub mod taped;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use composite::{composite, Composited};
pub use march::{sphere_trace, TraceResult};
pub use opacity::map_opacity;
pub use pipeline::{plan_rays, render, render_rays, RaySamples, RenderOutput};
pub use sampling::{accurate_sample, coarse_sample, fine_sample};
pub use taped::{render_taped, TapedImage};

/// How sample points are placed along each ray.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SamplingStrategy {
    #[serde(rename = "coarse-only")]
    CoarseOnly,
    /// A coarse round followed by importance sampling of its weights.
    #[serde(rename = "coarse+fine", alias = "coarse-fine")]
    CoarseFine,
    /// A coarse round plus one sample at the interpolated surface root.
    #[serde(rename = "coarse+accurate", alias = "coarse-accurate")]
    CoarseAccurate,
}

impl SamplingStrategy {
    pub const ALL: [SamplingStrategy; 3] = [
        SamplingStrategy::CoarseOnly,
        SamplingStrategy::CoarseFine,
        SamplingStrategy::CoarseAccurate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplingStrategy::CoarseOnly => "coarse-only",
            SamplingStrategy::CoarseFine => "coarse+fine",
            SamplingStrategy::CoarseAccurate => "coarse+accurate",
        }
    }
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse-only" | "coarse" => Ok(Self::CoarseOnly),
            "coarse+fine" | "coarse-fine" => Ok(Self::CoarseFine),
            "coarse+accurate" | "coarse-accurate" => Ok(Self::CoarseAccurate),
            other => Err(Error::InvalidConfig(format!(
                "unknown sampling strategy {other:?} (expected coarse-only, coarse+fine or coarse+accurate)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub strategy: SamplingStrategy,
    pub n_coarse: usize,
    /// Fine samples per ray (coarse+fine only).
    pub n_fine: usize,
    /// Half-width of the sampling band around the traced surface.
    pub delta: f64,
    /// Opacity sharpness.
    pub beta: f64,
    /// Field evaluations allowed while marching one ray.
    pub max_march_iters: u32,
    pub march_eps: f64,
    pub background: [f64; 3],
    /// March to the surface and sample a band around it. When false, the
    /// coarse round spans the whole near-far range of every ray (the
    /// conventional volume-rendering layout).
    pub traced: bool,
    /// Rays that miss but pass within `near_miss / beta` of the surface are
    /// still band-sampled around their closest approach, so the soft
    /// silhouette produced by the opacity mapping is rendered. Zero
    /// disables this and misses return pure background.
    pub near_miss: f64,
    /// Stratified jitter of sample positions (per-pixel seeded streams).
    pub jitter: bool,
    /// Compute the normal image (extra gradient queries, counted apart).
    pub normals: bool,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            strategy: SamplingStrategy::CoarseAccurate,
            n_coarse: 32,
            n_fine: 32,
            delta: 0.15,
            beta: 100.0,
            max_march_iters: 32,
            march_eps: 1e-3,
            background: [1.0; 3],
            traced: true,
            near_miss: 6.0,
            jitter: false,
            normals: true,
            seed: 0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("render: {m}")));
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if self.n_coarse < 2 {
            return bad(format!("n_coarse must be at least 2, got {}", self.n_coarse));
        }
        if self.strategy == SamplingStrategy::CoarseFine && self.n_fine == 0 {
            return bad("coarse+fine needs n_fine >= 1".into());
        }
        if self.max_march_iters == 0 {
            return bad("max_march_iters must be at least 1".into());
        }
        if !(self.march_eps > 0.0) {
            return bad("march_eps must be positive".into());
        }
        if !(self.near_miss >= 0.0 && self.near_miss.is_finite()) {
            return bad("near_miss must be non-negative".into());
        }
        if !self.background.iter().all(|c| (0.0..=1.0).contains(c)) {
            return bad("background must be in [0, 1]".into());
        }
        Ok(())
    }
}
