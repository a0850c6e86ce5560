//! Adaptive-moment optimizer over flat parameter slices.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    params: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, params: AdamParams) -> Self {
        Self {
            params,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update of `weights` in place.
    pub fn step(&mut self, weights: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(weights.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let AdamParams { beta1, beta2, eps } = self.params;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..weights.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            weights[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = vec![1.0, -1.0];
        let mut opt = Adam::new(2, AdamParams::default());
        opt.step(&mut w, &[0.3, -5.0], 0.01);
        assert!((w[0] - 0.99).abs() < 1e-7);
        assert!((w[1] + 0.99).abs() < 1e-7);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut w = vec![3.0];
        let mut opt = Adam::new(1, AdamParams::default());
        for _ in 0..2000 {
            let g = [2.0 * (w[0] - 1.5)];
            opt.step(&mut w, &g, 0.01);
        }
        assert!((w[0] - 1.5).abs() < 1e-2);
    }
}
