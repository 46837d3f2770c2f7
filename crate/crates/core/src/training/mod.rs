//! Datasets, the progressive adversarial loop and supervised SDF fitting.

pub mod dataset;
pub mod fit;
pub mod gan;
pub mod metrics;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::SamplingStrategy;

pub use dataset::{load_image_folder, synthesize_dataset, Dataset, DatasetKind, DatasetSource, Image, ImageFolder};
pub use fit::{fit_sdf, held_out_error, FitConfig, FitResult};
pub use gan::{GanConfig, GanTrainer, LogRow, CSV_HEADER};
pub use metrics::{mean_roundness, roundness};

/// One resolution stage of the progressive schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSpec {
    pub iterations: u64,
    pub resolution: usize,
    pub batch_size: usize,
    pub strategy: SamplingStrategy,
    /// Half width of the sampling band around the traced surface.
    pub delta: f64,
    pub n_coarse: usize,
    /// Importance samples for coarse+fine; ignored otherwise.
    pub n_fine: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lambda_eikonal: f64,
    pub lambda_normal: f64,
    /// Lower bound on the opacity sharpness during this stage.
    pub beta_floor: f64,
}

impl Default for StageSpec {
    fn default() -> Self {
        desk_stages().remove(0)
    }
}

impl StageSpec {
    /// Samples per traced ray.
    pub fn point_budget(&self) -> usize {
        match self.strategy {
            SamplingStrategy::CoarseOnly => self.n_coarse,
            SamplingStrategy::CoarseFine => self.n_coarse + self.n_fine,
            SamplingStrategy::CoarseAccurate => self.n_coarse + 1,
        }
    }
}

/// The three-stage plan at desk scale: 16x16 coarse+fine (16+16), then
/// 32x32 coarse+accurate (16+1), then 48x48 coarse+accurate (8+1). The
/// loss weights follow the paper's schedule (Eikonal 0.5 throughout,
/// normal term off in the first stage and 1.0 afterwards).
pub fn desk_stages() -> Vec<StageSpec> {
    let base = StageSpec {
        iterations: 2000,
        resolution: 16,
        batch_size: 8,
        strategy: SamplingStrategy::CoarseFine,
        delta: 0.3,
        n_coarse: 16,
        n_fine: 16,
        lr_g: 4e-4,
        lr_d: 4e-4,
        lambda_eikonal: 0.5,
        lambda_normal: 0.0,
        beta_floor: 20.0,
    };
    vec![
        base.clone(),
        StageSpec {
            resolution: 32,
            strategy: SamplingStrategy::CoarseAccurate,
            delta: 0.2,
            n_coarse: 16,
            n_fine: 0,
            lambda_normal: 1.0,
            beta_floor: 40.0,
            ..base.clone()
        },
        StageSpec {
            resolution: 48,
            strategy: SamplingStrategy::CoarseAccurate,
            delta: 0.15,
            n_coarse: 8,
            n_fine: 0,
            lambda_normal: 1.0,
            beta_floor: 80.0,
            ..base
        },
    ]
}

/// Checks one stage and the trends between consecutive stages:
/// resolution and beta floor never drop, band width and point budget
/// never grow.
pub fn validate_stages(stages: &[StageSpec]) -> Result<()> {
    let bad = |m: String| Err(Error::InvalidConfig(m));
    if stages.is_empty() {
        return bad("at least one training stage is required".into());
    }
    for (i, s) in stages.iter().enumerate() {
        if s.resolution < 4 || s.batch_size == 0 {
            return bad(format!("stage {i}: resolution must be >= 4 and batch_size >= 1"));
        }
        if !(s.delta > 0.0 && s.beta_floor > 0.0 && s.lr_g > 0.0 && s.lr_d > 0.0) {
            return bad(format!("stage {i}: delta, beta_floor and learning rates must be positive"));
        }
        if !(s.lambda_eikonal >= 0.0 && s.lambda_normal >= 0.0) {
            return bad(format!("stage {i}: loss weights must be non-negative"));
        }
        let min_coarse = if s.strategy == SamplingStrategy::CoarseAccurate { 2 } else { 1 };
        if s.n_coarse < min_coarse || (s.strategy == SamplingStrategy::CoarseFine && s.n_fine == 0) {
            return bad(format!("stage {i}: too few samples for {}", s.strategy));
        }
    }
    for (i, w) in stages.windows(2).enumerate() {
        let (a, b) = (&w[0], &w[1]);
        if b.resolution < a.resolution {
            return bad(format!("stage {}: resolution decreases", i + 1));
        }
        if b.delta > a.delta {
            return bad(format!("stage {}: sampling band widens", i + 1));
        }
        if b.point_budget() > a.point_budget() {
            return bad(format!("stage {}: per-ray point budget grows", i + 1));
        }
        if b.beta_floor < a.beta_floor {
            return bad(format!("stage {}: beta floor decreases", i + 1));
        }
    }
    Ok(())
}

/// Index of the stage running iteration `it` (0-based), or `None` past
/// the end of the plan.
pub fn stage_at(stages: &[StageSpec], it: u64) -> Option<usize> {
    let mut end = 0;
    for (i, s) in stages.iter().enumerate() {
        end += s.iterations;
        if it < end {
            return Some(i);
        }
    }
    None
}

/// Total iterations of the plan.
pub fn total_iterations(stages: &[StageSpec]) -> u64 {
    stages.iter().map(|s| s.iterations).sum()
}

/// Whether iteration count `n` (completed iterations) ends a stage.
pub fn is_stage_boundary(stages: &[StageSpec], n: u64) -> bool {
    let mut end = 0;
    stages.iter().any(|s| {
        end += s.iterations;
        end == n
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_plan_is_valid_and_follows_the_trends() {
        let s = desk_stages();
        validate_stages(&s).unwrap();
        assert_eq!(s.iter().map(|x| x.point_budget()).collect::<Vec<_>>(), vec![32, 17, 9]);
        assert_eq!(s.iter().map(|x| x.beta_floor).collect::<Vec<_>>(), vec![20.0, 40.0, 80.0]);
        assert_eq!((s[1].lambda_eikonal, s[1].lambda_normal), (0.5, 1.0));
    }

    #[test]
    fn trend_violations_are_rejected() {
        let mut s = desk_stages();
        s[2].resolution = 16;
        assert!(validate_stages(&s).is_err());
        let mut s = desk_stages();
        s[1].delta = 0.5;
        assert!(validate_stages(&s).is_err());
        let mut s = desk_stages();
        s[2].n_coarse = 32;
        assert!(validate_stages(&s).is_err());
        let mut s = desk_stages();
        s[1].beta_floor = 10.0;
        assert!(validate_stages(&s).is_err());
        assert!(validate_stages(&[]).is_err());
    }

    #[test]
    fn stage_lookup() {
        let s = desk_stages();
        assert_eq!(stage_at(&s, 0), Some(0));
        assert_eq!(stage_at(&s, 1999), Some(0));
        assert_eq!(stage_at(&s, 2000), Some(1));
        assert_eq!(stage_at(&s, 6000), None);
        assert!(is_stage_boundary(&s, 4000));
        assert!(!is_stage_boundary(&s, 4001));
        assert_eq!(total_iterations(&s), 6000);
    }
}
