//! Sphere tracing.

use crate::error::{Error, Result};
use crate::geometry::Ray;
use crate::sdf::SdfField;

/// Outcome of marching one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TraceResult {
    /// The field dropped below the convergence threshold at `t`.
    Hit { t: f64, steps: u32 },
    /// No convergence; `t_closest` is where the smallest distance
    /// `min_s` was observed.
    Miss {
        t_closest: f64,
        min_s: f64,
        steps: u32,
    },
}

impl TraceResult {
    pub fn hit_t(&self) -> Option<f64> {
        match *self {
            TraceResult::Hit { t, .. } => Some(t),
            TraceResult::Miss { .. } => None,
        }
    }

    /// Number of advances along the ray.
    pub fn steps(&self) -> u32 {
        match *self {
            TraceResult::Hit { steps, .. } | TraceResult::Miss { steps, .. } => steps,
        }
    }
}

/// Marching state of one ray, advanced one field evaluation at a time so
/// many rays can share batched queries.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Marcher {
    pub t: f64,
    far: f64,
    eps: f64,
    max_evals: u32,
    evals: u32,
    steps: u32,
    min_s: f64,
    t_closest: f64,
    pub done: Option<TraceResult>,
}

impl Marcher {
    pub fn new(t0: f64, far: f64, eps: f64, max_evals: u32) -> Self {
        let mut m = Self {
            t: t0,
            far,
            eps,
            max_evals,
            evals: 0,
            steps: 0,
            min_s: f64::INFINITY,
            t_closest: t0,
            done: None,
        };
        if t0 > far || max_evals == 0 {
            m.finish_miss();
        }
        m
    }

    fn finish_miss(&mut self) {
        self.done = Some(TraceResult::Miss {
            t_closest: self.t_closest,
            min_s: self.min_s,
            steps: self.steps,
        });
    }

    pub fn evals(&self) -> u32 {
        self.evals
    }

    /// Feeds the distance at the current `t`.
    pub fn advance(&mut self, s: f64) {
        debug_assert!(self.done.is_none());
        self.evals += 1;
        if s < self.min_s {
            self.min_s = s;
            self.t_closest = self.t;
        }
        if s < self.eps {
            self.done = Some(TraceResult::Hit {
                t: self.t,
                steps: self.steps,
            });
            return;
        }
        if !s.is_finite() {
            self.finish_miss();
            return;
        }
        self.t += s;
        self.steps += 1;
        if self.t > self.far || self.evals >= self.max_evals {
            self.finish_miss();
        }
    }
}

/// Marches `ray` from `t0` with `t <- t + s(o + t d)` until `s < eps`,
/// `t > far`, or `max_evals` field evaluations have been spent.
///
/// Returns the result and the number of field evaluations. Starting inside
/// the surface (negative distance at `t0`) is an error.
pub fn sphere_trace(
    field: &dyn SdfField,
    ray: &Ray,
    t0: f64,
    far: f64,
    eps: f64,
    max_evals: u32,
) -> Result<(TraceResult, u32)> {
    let mut m = Marcher::new(t0, far, eps, max_evals);
    while m.done.is_none() {
        let s = field.distance(ray.at(m.t));
        if m.evals() == 0 && s < 0.0 {
            return Err(Error::StartInsideSurface(s));
        }
        m.advance(s);
    }
    Ok((m.done.expect("loop exits when done"), m.evals()))
}
