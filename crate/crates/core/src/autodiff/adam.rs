//! Bias-corrected Adam.

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter count does not match optimizer state");
        assert_eq!(grads.len(), self.m.len(), "gradient count does not match optimizer state");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Rounds each parameter to the nearest `f32`, so that what training uses
/// is exactly what a checkpoint stores.
pub fn round_to_f32(params: &mut [f64]) {
    for p in params {
        *p = *p as f32 as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::new(3, 1e-3);
        let mut p = vec![0.5, -1.0, 2.0];
        s.step(&mut p, &[0.0; 3]);
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1 after bias correction, so the update is
        // lr / (1 + eps).
        let mut s = AdamState::new(1, 1e-3);
        let mut p = vec![0.0];
        s.step(&mut p, &[1.0]);
        let expected = 1e-3 / (1.0 + 1e-8);
        assert!((p[0] + expected).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn identical_runs_match() {
        let run = || {
            let mut s = AdamState::new(2, 1e-2);
            let mut p = vec![1.0, -1.0];
            for k in 0..20 {
                let g = [p[0] * 2.0 + k as f64 * 0.01, p[1].sin()];
                s.step(&mut p, &g);
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    #[should_panic(expected = "does not match")]
    fn shape_mismatch_panics() {
        let mut s = AdamState::new(2, 1e-3);
        s.step(&mut [0.0; 3], &[0.0; 3]);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut s = AdamState::new(1, 0.1);
        let mut p = vec![3.0];
        for _ in 0..500 {
            let g = [2.0 * (p[0] - 1.0)];
            s.step(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-2);
    }
}
