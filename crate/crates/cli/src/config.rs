//! The TOML configuration file. Every section has defaults, so an empty
//! file (or none) is a valid configuration; unknown keys are rejected.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use sdf3d_core::losses::LossWeights;
use sdf3d_core::network::NetConfig;
use sdf3d_core::render::RenderConfig;
use sdf3d_core::training::{desk_stages, DatasetSource, FitConfig, StageSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Master seed; replaces `render.seed` and seeds every subcommand.
    pub seed: u64,
    pub network: NetConfig,
    pub render: RenderConfig,
    pub camera: CameraSection,
    pub loss: LossWeights,
    pub stages: Vec<StageSpec>,
    pub train: TrainSection,
    pub fit: FitSection,
    pub mesh: MeshSection,
    pub bench: BenchSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            network: NetConfig::default(),
            render: RenderConfig::default(),
            camera: CameraSection::default(),
            loss: LossWeights::default(),
            stages: desk_stages(),
            train: TrainSection::default(),
            fit: FitSection::default(),
            mesh: MeshSection::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSection {
    pub azimuth: f64,
    pub polar: f64,
    pub radius: f64,
    /// Vertical field of view in degrees.
    pub fov_degrees: f64,
    pub size: usize,
}

impl Default for CameraSection {
    fn default() -> Self {
        Self {
            azimuth: 0.0,
            polar: 1.2,
            radius: 1.0,
            fov_degrees: 90.0,
            size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub dataset: DatasetSource,
    pub disc_channels: usize,
    pub beta_init: f64,
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            disc_channels: 32,
            beta_init: 30.0,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    /// Built-in analytic scene to fit.
    pub scene: String,
    /// Network used by `fit`; checkpoints whose layers match it load with it.
    pub network: NetConfig,
    pub iterations: u64,
    pub batch: usize,
    pub lr: f64,
    pub lambda_eikonal: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        let f = FitConfig::default();
        Self {
            scene: "unit-sphere".into(),
            network: f.net,
            iterations: f.iterations,
            batch: f.batch,
            lr: f.lr,
            lambda_eikonal: f.lambda_eikonal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshSection {
    pub resolution: usize,
    /// Half width of the cube `[-bound, bound]^3` that is meshed.
    pub bound: f64,
}

impl Default for MeshSection {
    fn default() -> Self {
        Self {
            resolution: 128,
            bound: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub scene: String,
    pub size: usize,
    pub n_dense: usize,
    pub frames: usize,
    pub warmup: usize,
    /// Poses on a ring around the object at `camera.polar`/`camera.radius`.
    pub poses: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub threads: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            scene: "sphere".into(),
            size: 128,
            n_dense: 512,
            frames: 20,
            warmup: 2,
            poses: 4,
            n_coarse: 32,
            n_fine: 32,
            threads: 4,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

/// `key = default` lines for every configuration key.
pub fn key_listing() -> String {
    let value = toml::Value::try_from(Config::default()).expect("default config serializes");
    let mut lines = Vec::new();
    flatten("", &value, &mut lines);
    lines.join("\n")
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        toml::Value::Array(a) if a.iter().all(|x| x.is_table()) && !a.is_empty() => {
            for (i, x) in a.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), x, out);
            }
        }
        other => out.push(format!("  {prefix} = {other}")),
    }
}
