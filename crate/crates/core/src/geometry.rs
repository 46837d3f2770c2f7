//! Vectors, rays and the pinhole camera.
//!
//! Coordinates are right-handed with +z up. Image pixel (0, 0) is the
//! top-left corner; rows grow downwards.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Div, Index, Mul, Neg, Sub};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn splat(v: f64) -> Self {
        Self::new(v, v, v)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    /// Unit vector in the same direction. The zero vector maps to itself.
    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n > 0.0 {
            self / n
        } else {
            self
        }
    }

    pub fn abs(self) -> Vec3 {
        Vec3::new(self.x.abs(), self.y.abs(), self.z.abs())
    }

    pub fn max_elem(self) -> f64 {
        self.x.max(self.y).max(self.z)
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Vec3 {
        Vec3::new(f(self.x), f(self.y), f(self.z))
    }

    pub fn mul_elem(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Angle to another vector in radians.
    pub fn angle_to(self, o: Vec3) -> f64 {
        let c = self.dot(o) / (self.norm() * o.norm());
        c.clamp(-1.0, 1.0).acos()
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

/// `r(t) = origin + t * direction` with a unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    /// Builds a ray, normalizing the direction.
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Self {
            origin,
            direction: direction.normalized(),
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        point_at(self, t)
    }
}

pub fn point_at(ray: &Ray, t: f64) -> Vec3 {
    debug_assert!(t.is_finite(), "ray parameter must be finite");
    ray.origin + ray.direction * t
}

/// Camera placed on a sphere around `look_at`, aimed at it.
///
/// `polar` is measured from +z, so `polar = 0` looks straight down and
/// `polar = pi/2` sits on the horizon. `fov` is the vertical field of view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraPose {
    pub azimuth: f64,
    pub polar: f64,
    pub radius: f64,
    pub fov: f64,
    pub look_at: Vec3,
}

pub const DEFAULT_FOV: f64 = PI / 2.0;

impl Default for CameraPose {
    fn default() -> Self {
        Self {
            azimuth: 0.0,
            polar: PI / 2.0,
            radius: 1.0,
            fov: DEFAULT_FOV,
            look_at: Vec3::ZERO,
        }
    }
}

impl CameraPose {
    pub fn new(azimuth: f64, polar: f64, radius: f64) -> Self {
        Self {
            azimuth,
            polar,
            radius,
            ..Self::default()
        }
    }

    pub fn with_fov(mut self, fov: f64) -> Self {
        self.fov = fov;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov > 0.0 && self.fov < PI) {
            return Err(Error::InvalidConfig(format!(
                "field of view {} outside (0, pi)",
                self.fov
            )));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "camera radius {} must be positive",
                self.radius
            )));
        }
        if !(0.0..=PI).contains(&self.polar) {
            return Err(Error::InvalidConfig(format!(
                "polar angle {} outside [0, pi]",
                self.polar
            )));
        }
        if !self.azimuth.is_finite() || !self.look_at.is_finite() {
            return Err(Error::InvalidConfig("camera pose is not finite".into()));
        }
        Ok(())
    }

    pub fn position(&self) -> Vec3 {
        let (sp, cp) = self.polar.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        self.look_at + Vec3::new(sp * ca, sp * sa, cp) * self.radius
    }

    /// Ray parameter bounds for an object inside the unit ball around `look_at`.
    pub fn near_far(&self) -> (f64, f64) {
        ((self.radius - 1.0).max(0.0), self.radius + 1.0)
    }

    /// Orthonormal camera frame `(forward, right, up)`.
    pub fn frame(&self) -> (Vec3, Vec3, Vec3) {
        let forward = (self.look_at - self.position()).normalized();
        let mut right = forward.cross(Vec3::Z);
        if right.norm() < 1e-9 {
            // Looking along the z axis: fall back to +y as the up hint.
            right = forward.cross(Vec3::Y);
        }
        let right = right.normalized();
        let up = right.cross(forward);
        (forward, right, up)
    }
}

/// Row-major grid of primary rays, one per pixel.
#[derive(Debug, Clone)]
pub struct RayGrid {
    pub width: usize,
    pub height: usize,
    pub rays: Vec<Ray>,
}

pub fn generate_rays(pose: &CameraPose, width: usize, height: usize) -> Result<RayGrid> {
    pose.validate()?;
    if width == 0 || height == 0 {
        return Err(Error::InvalidConfig(format!(
            "image size {width}x{height} must be at least 1x1"
        )));
    }
    let origin = pose.position();
    let (forward, right, up) = pose.frame();
    let half_h = (pose.fov * 0.5).tan();
    let half_w = half_h * width as f64 / height as f64;
    let mut rays = Vec::with_capacity(width * height);
    for row in 0..height {
        let v = 1.0 - 2.0 * (row as f64 + 0.5) / height as f64;
        for col in 0..width {
            let u = 2.0 * (col as f64 + 0.5) / width as f64 - 1.0;
            let dir = forward + right * (u * half_w) + up * (v * half_h);
            rays.push(Ray::new(origin, dir));
        }
    }
    Ok(RayGrid {
        width,
        height,
        rays,
    })
}

/// Distribution over camera poses used for training and synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PoseDistribution {
    /// Area-uniform on the spherical band given by the angle ranges.
    UniformHemisphere {
        azimuth_range: (f64, f64),
        polar_range: (f64, f64),
        radius: f64,
        fov: f64,
    },
    /// Gaussian around a forward-facing mean pose, clamped to the upper hemisphere.
    GaussianForward {
        azimuth_mean: f64,
        polar_mean: f64,
        azimuth_std: f64,
        polar_std: f64,
        radius: f64,
        fov: f64,
    },
}

impl Default for PoseDistribution {
    fn default() -> Self {
        Self::carla()
    }
}

impl PoseDistribution {
    /// Full azimuth circle, polar angle 0..85 degrees.
    pub fn carla() -> Self {
        Self::UniformHemisphere {
            azimuth_range: (0.0, 2.0 * PI),
            polar_range: (0.0, 85f64.to_radians()),
            radius: 1.0,
            fov: DEFAULT_FOV,
        }
    }

    /// Forward-facing faces: 0.3 rad horizontal, 0.155 rad vertical deviation.
    pub fn face_forward() -> Self {
        Self::GaussianForward {
            azimuth_mean: 0.0,
            polar_mean: PI / 2.0,
            azimuth_std: 0.3,
            polar_std: 0.155,
            radius: 1.0,
            fov: DEFAULT_FOV,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::UniformHemisphere {
                azimuth_range,
                polar_range,
                radius,
                fov,
            } => {
                let ok = azimuth_range.0 < azimuth_range.1
                    && polar_range.0 <= polar_range.1
                    && polar_range.0 >= 0.0
                    && polar_range.1 <= PI;
                if !ok {
                    return Err(Error::InvalidConfig(
                        "pose distribution ranges are empty or out of bounds".into(),
                    ));
                }
                CameraPose::new(0.0, 0.0, radius).with_fov(fov).validate()
            }
            Self::GaussianForward {
                azimuth_std,
                polar_std,
                radius,
                fov,
                polar_mean,
                ..
            } => {
                if azimuth_std < 0.0 || polar_std < 0.0 {
                    return Err(Error::InvalidConfig(
                        "pose standard deviations must be non-negative".into(),
                    ));
                }
                CameraPose::new(0.0, polar_mean.clamp(0.0, PI), radius)
                    .with_fov(fov)
                    .validate()
            }
        }
    }

    pub fn sample(&self, rng: &mut crate::rng::Rng) -> CameraPose {
        match *self {
            Self::UniformHemisphere {
                azimuth_range,
                polar_range,
                radius,
                fov,
            } => {
                let azimuth = rng.random_range(azimuth_range.0..azimuth_range.1);
                // Uniform in cos(polar) gives uniform density over the sphere patch.
                let (c_hi, c_lo) = (polar_range.0.cos(), polar_range.1.cos());
                let u: f64 = rng.random();
                let polar = (c_lo + u * (c_hi - c_lo)).clamp(-1.0, 1.0).acos();
                let polar = polar.clamp(polar_range.0, polar_range.1);
                CameraPose {
                    azimuth,
                    polar,
                    radius,
                    fov,
                    look_at: Vec3::ZERO,
                }
            }
            Self::GaussianForward {
                azimuth_mean,
                polar_mean,
                azimuth_std,
                polar_std,
                radius,
                fov,
            } => {
                let na: f64 = StandardNormal.sample(rng);
                let np: f64 = StandardNormal.sample(rng);
                CameraPose {
                    azimuth: azimuth_mean + azimuth_std * na,
                    polar: (polar_mean + polar_std * np).clamp(0.0, PI / 2.0),
                    radius,
                    fov,
                    look_at: Vec3::ZERO,
                }
            }
        }
    }
}

/// Convenience wrapper matching the free-function form used elsewhere.
pub fn sample_pose(dist: &PoseDistribution, rng: &mut crate::rng::Rng) -> CameraPose {
    dist.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;

    #[test]
    fn point_at_examples() {
        let r = Ray::new(Vec3::ZERO, Vec3::Z);
        assert_eq!(r.at(0.0), Vec3::ZERO);
        let r = Ray::new(Vec3::new(0.0, 0.0, 3.0), -Vec3::Z);
        assert_eq!(r.at(2.0), Vec3::new(0.0, 0.0, 1.0));
        let r = Ray::new(Vec3::splat(1.0), Vec3::X);
        assert_eq!(r.at(0.5), Vec3::new(1.5, 1.0, 1.0));
    }

    #[test]
    fn ray_grid_shape_and_axis() {
        let pose = CameraPose::new(0.3, 1.1, 2.0);
        let grid = generate_rays(&pose, 128, 128).unwrap();
        assert_eq!(grid.rays.len(), 16384);
        for r in &grid.rays {
            assert_abs_diff_eq!(r.direction.norm(), 1.0, epsilon = 1e-6);
        }
        let odd = generate_rays(&pose, 33, 17).unwrap();
        let center = odd.rays[8 * 33 + 16];
        let axis = (pose.look_at - pose.position()).normalized();
        assert_abs_diff_eq!((center.direction - axis).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn top_left_pixel_is_up_and_left() {
        let pose = CameraPose::new(0.0, PI / 2.0, 3.0);
        let grid = generate_rays(&pose, 4, 4).unwrap();
        let (_, right, up) = pose.frame();
        let d = grid.rays[0].direction;
        assert!(d.dot(up) > 0.0);
        assert!(d.dot(right) < 0.0);
        assert_abs_diff_eq!(up.z, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn invalid_fov_rejected() {
        let pose = CameraPose::default().with_fov(PI);
        assert!(matches!(
            generate_rays(&pose, 2, 2),
            Err(Error::InvalidConfig(_))
        ));
        let pose = CameraPose::default().with_fov(0.0);
        assert!(generate_rays(&pose, 2, 2).is_err());
        assert!(generate_rays(&CameraPose::default(), 0, 2).is_err());
    }

    #[test]
    fn top_down_camera_has_a_frame() {
        let pose = CameraPose::new(0.0, 0.0, 2.0);
        let (f, r, u) = pose.frame();
        assert!(f.is_finite() && r.is_finite() && u.is_finite());
        assert_abs_diff_eq!(f.dot(r), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_poses_stay_in_range() {
        let dist = PoseDistribution::carla();
        let mut rng = stream(3, &[]);
        for _ in 0..10_000 {
            let p = dist.sample(&mut rng);
            assert!((0.0..2.0 * PI).contains(&p.azimuth));
            assert!(p.polar >= 0.0 && p.polar <= 85f64.to_radians() + 1e-12);
        }
    }

    #[test]
    fn degenerate_gaussian_returns_mean() {
        let dist = PoseDistribution::GaussianForward {
            azimuth_mean: 0.4,
            polar_mean: 1.2,
            azimuth_std: 0.0,
            polar_std: 0.0,
            radius: 1.0,
            fov: DEFAULT_FOV,
        };
        let p = dist.sample(&mut stream(9, &[]));
        assert_eq!(p.azimuth, 0.4);
        assert_eq!(p.polar, 1.2);
    }

    #[test]
    fn gaussian_clamped_to_upper_hemisphere() {
        let dist = PoseDistribution::face_forward();
        let mut rng = stream(5, &[]);
        for _ in 0..2000 {
            let p = dist.sample(&mut rng);
            assert!(p.polar <= PI / 2.0 && p.polar >= 0.0);
        }
    }

    #[test]
    fn pose_sampling_is_deterministic() {
        let dist = PoseDistribution::carla();
        let a = dist.sample(&mut stream(11, &[4]));
        let b = dist.sample(&mut stream(11, &[4]));
        assert_eq!(a, b);
    }
}
