//! Analytic signed distance fields.
//!
//! These are the ground truth for every renderer, loss and mesh test. Sign
//! convention: positive outside, negative inside, zero on the surface.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Anything that can answer signed distances, colors and spatial gradients.
///
/// Batched entry points let the neural generator amortize its matrix
/// products; analytic fields just loop.
pub trait SdfField: Sync {
    fn distance_batch(&self, points: &[Vec3], out: &mut [f64]);

    /// Signed distance and RGB color at each point, seen along `dirs`.
    fn shade_batch(&self, points: &[Vec3], dirs: &[Vec3], dist: &mut [f64], rgb: &mut [[f64; 3]]);

    fn gradient(&self, p: Vec3) -> Vec3;

    fn distance(&self, p: Vec3) -> f64 {
        let mut out = [0.0];
        self.distance_batch(&[p], &mut out);
        out[0]
    }

    fn gradient_batch(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.iter().map(|&p| self.gradient(p)).collect()
    }
}

/// Closed-form signed distance fields.
///
/// Primitives return exact distances. `Union` returns the minimum over its
/// children, which is exact outside all children and a lower bound inside
/// overlapping regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AnalyticSdf {
    Sphere { center: Vec3, radius: f64 },
    Box { center: Vec3, half_extents: Vec3 },
    /// Ring around the z axis with major radius `major` and tube radius `minor`.
    Torus { center: Vec3, major: f64, minor: f64 },
    /// Points with `normal . p = offset`.
    Plane { normal: Vec3, offset: f64 },
    Union { children: Vec<AnalyticSdf> },
    Translate { inner: Box<AnalyticSdf>, offset: Vec3 },
}

impl AnalyticSdf {
    pub fn sphere(center: Vec3, radius: f64) -> Self {
        Self::Sphere { center, radius }
    }

    pub fn unit_sphere() -> Self {
        Self::sphere(Vec3::ZERO, 1.0)
    }

    pub fn cuboid(center: Vec3, half_extents: Vec3) -> Self {
        Self::Box {
            center,
            half_extents,
        }
    }

    pub fn plane(normal: Vec3, offset: f64) -> Self {
        Self::Plane { normal, offset }
    }

    pub fn union(children: Vec<AnalyticSdf>) -> Self {
        Self::Union { children }
    }

    /// Two spheres one behind the other along x, so rays from +x cross
    /// four surfaces.
    pub fn two_spheres() -> Self {
        Self::union(vec![
            Self::sphere(Vec3::new(0.35, 0.0, 0.0), 0.25),
            Self::sphere(Vec3::new(-0.35, 0.0, 0.0), 0.25),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        match self {
            Self::Sphere { radius, center } => {
                if !(*radius > 0.0) || !center.is_finite() {
                    return bad("sphere radius must be positive");
                }
            }
            Self::Box {
                half_extents,
                center,
            } => {
                if !(half_extents.x > 0.0 && half_extents.y > 0.0 && half_extents.z > 0.0)
                    || !center.is_finite()
                {
                    return bad("box half extents must be positive");
                }
            }
            Self::Torus { major, minor, .. } => {
                if !(*major > 0.0 && *minor > 0.0) {
                    return bad("torus radii must be positive");
                }
            }
            Self::Plane { normal, offset } => {
                if (normal.norm() - 1.0).abs() > 1e-9 || !offset.is_finite() {
                    return bad("plane normal must have unit length");
                }
            }
            Self::Union { children } => {
                if children.is_empty() {
                    return bad("union needs at least one child");
                }
                for c in children {
                    c.validate()?;
                }
            }
            Self::Translate { inner, offset } => {
                if !offset.is_finite() {
                    return bad("translation must be finite");
                }
                inner.validate()?;
            }
        }
        Ok(())
    }

    pub fn eval(&self, p: Vec3) -> f64 {
        match self {
            Self::Sphere { center, radius } => (p - *center).norm() - radius,
            Self::Box {
                center,
                half_extents,
            } => {
                let q = (p - *center).abs() - *half_extents;
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.max_elem().min(0.0)
            }
            Self::Torus {
                center,
                major,
                minor,
            } => {
                let d = p - *center;
                let ring = (d.x * d.x + d.y * d.y).sqrt() - major;
                (ring * ring + d.z * d.z).sqrt() - minor
            }
            Self::Plane { normal, offset } => normal.dot(p) - offset,
            Self::Union { children } => children
                .iter()
                .map(|c| c.eval(p))
                .fold(f64::INFINITY, f64::min),
            Self::Translate { inner, offset } => inner.eval(p - *offset),
        }
    }

    /// Analytic gradient. At creases and centers the first active face or
    /// child (lowest index) wins, and centers return +x.
    pub fn grad(&self, p: Vec3) -> Vec3 {
        match self {
            Self::Sphere { center, .. } => {
                let d = p - *center;
                if d.norm() == 0.0 {
                    Vec3::X
                } else {
                    d.normalized()
                }
            }
            Self::Box {
                center,
                half_extents,
            } => {
                let d = p - *center;
                let sign = d.map(|v| if v < 0.0 { -1.0 } else { 1.0 });
                let q = d.abs() - *half_extents;
                if q.max_elem() > 0.0 {
                    q.map(|v| v.max(0.0)).normalized().mul_elem(sign)
                } else {
                    let axis = (0..3)
                        .fold(0, |best, i| if q[i] > q[best] { i } else { best });
                    let mut g = [0.0; 3];
                    g[axis] = sign[axis];
                    Vec3::from(g)
                }
            }
            Self::Torus { center, major, .. } => {
                let d = p - *center;
                let rho = (d.x * d.x + d.y * d.y).sqrt();
                let radial = if rho > 0.0 {
                    Vec3::new(d.x / rho, d.y / rho, 0.0)
                } else {
                    Vec3::X
                };
                let q = Vec3::new(rho - major, 0.0, d.z);
                if q.norm() == 0.0 {
                    return radial;
                }
                (radial * q.x + Vec3::Z * q.z).normalized()
            }
            Self::Plane { normal, .. } => *normal,
            Self::Union { children } => {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (i, c) in children.iter().enumerate() {
                    let d = c.eval(p);
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                children[best].grad(p)
            }
            Self::Translate { inner, offset } => inner.grad(p - *offset),
        }
    }
}

/// Surface color rule for analytic scenes; every output lies in [0, 1]^3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SceneColor {
    Constant { rgb: [f64; 3] },
    /// `0.5 + 0.5 * p`, clamped.
    Position,
    /// Piecewise-constant random colors on a lattice of the given cell size.
    Hashed { cell: f64 },
}

impl Default for SceneColor {
    fn default() -> Self {
        Self::Constant {
            rgb: [0.8, 0.35, 0.2],
        }
    }
}

impl SceneColor {
    pub fn at(&self, p: Vec3) -> [f64; 3] {
        match self {
            Self::Constant { rgb } => rgb.map(|c| c.clamp(0.0, 1.0)),
            Self::Position => (p * 0.5 + Vec3::splat(0.5))
                .map(|c| c.clamp(0.0, 1.0))
                .to_array(),
            Self::Hashed { cell } => {
                let k = p.map(|v| (v / cell).floor());
                let h = crate::rng::derive_key(
                    0x5eed,
                    &[k.x as i64 as u64, k.y as i64 as u64, k.z as i64 as u64],
                );
                [
                    (h & 0xff) as f64 / 255.0,
                    ((h >> 8) & 0xff) as f64 / 255.0,
                    ((h >> 16) & 0xff) as f64 / 255.0,
                ]
            }
        }
    }
}

/// An analytic field with a color rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticScene {
    pub sdf: AnalyticSdf,
    #[serde(default)]
    pub color: SceneColor,
}

impl AnalyticScene {
    pub fn new(sdf: AnalyticSdf, color: SceneColor) -> Self {
        Self { sdf, color }
    }

    /// Built-in scenes addressable by name from the command line.
    pub fn named(name: &str) -> Option<Self> {
        let sdf = match name {
            "sphere" => AnalyticSdf::sphere(Vec3::ZERO, 0.5),
            "unit-sphere" => AnalyticSdf::unit_sphere(),
            "two-spheres" => AnalyticSdf::two_spheres(),
            "box" => AnalyticSdf::cuboid(Vec3::ZERO, Vec3::splat(0.3)),
            "torus" => AnalyticSdf::Torus {
                center: Vec3::ZERO,
                major: 0.4,
                minor: 0.15,
            },
            _ => return None,
        };
        Some(Self::new(sdf, SceneColor::default()))
    }

    pub const NAMES: [&'static str; 5] = ["sphere", "unit-sphere", "two-spheres", "box", "torus"];
}

impl SdfField for AnalyticScene {
    fn distance_batch(&self, points: &[Vec3], out: &mut [f64]) {
        for (o, &p) in out.iter_mut().zip(points) {
            *o = self.sdf.eval(p);
        }
    }

    fn shade_batch(&self, points: &[Vec3], _dirs: &[Vec3], dist: &mut [f64], rgb: &mut [[f64; 3]]) {
        for ((d, c), &p) in dist.iter_mut().zip(rgb.iter_mut()).zip(points) {
            *d = self.sdf.eval(p);
            *c = self.color.at(p);
        }
    }

    fn gradient(&self, p: Vec3) -> Vec3 {
        self.sdf.grad(p)
    }
}
