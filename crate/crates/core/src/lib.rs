//! Signed-distance-field rendering and generative training.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`] – vectors, rays, pinhole cameras and pose distributions.
//! * [`sdf`] – analytic signed distance fields used as ground truth.
//! * [`autodiff`] – a small reverse-mode tape, Adam and the checkpoint format.
//! * [`network`] – the conditioned generator MLP (positional encoding, trunk,
//!   distance head, color head).
//! * [`render`] – sphere tracing, band sampling, distance-to-opacity mapping
//!   and front-to-back compositing.
//! * [`losses`] – adversarial loss with R1, Eikonal and normal regularizers.
//! * [`training`] – datasets, the progressive GAN loop and supervised fitting.
//! * [`mesh`] – marching cubes and OBJ/PLY export.
//! * [`bench`] – sampling-strategy comparison and throughput measurement.

pub mod autodiff;
pub mod bench;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod mesh;
pub mod network;
pub mod render;
pub mod rng;
pub mod sdf;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{CameraPose, PoseDistribution, Ray, Vec3};
pub use network::{ColorCode, GeneratorNetwork, NetConfig, ShapeCode};
pub use render::{RenderConfig, RenderOutput, SamplingStrategy};
pub use sdf::{AnalyticScene, AnalyticSdf, SceneColor, SdfField};
