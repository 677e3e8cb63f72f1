//! Adam over any [`Parameters`] container.

use serde::{Deserialize, Serialize};

use crate::nn::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> f64 {
        let g = grads.flatten();
        if self.first.len() != g.len() {
            self.first = vec![0.0; g.len()];
            self.second = vec![0.0; g.len()];
        }
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let clip = match self.cfg.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            ..
        } = self.cfg;
        let bias1 = 1.0 - beta1.powi(self.steps as i32);
        let bias2 = 1.0 - beta2.powi(self.steps as i32);
        let (first, second) = (&mut self.first, &mut self.second);
        let mut k = 0;
        params.visit_mut("", &mut |_, m| {
            for p in m.iter_mut() {
                let gk = g[k] * clip;
                first[k] = beta1 * first[k] + (1.0 - beta1) * gk;
                second[k] = beta2 * second[k] + (1.0 - beta2) * gk * gk;
                let mhat = first[k] / bias1;
                let vhat = second[k] / bias2;
                *p -= learning_rate * mhat / (vhat.sqrt() + epsilon);
                k += 1;
            }
        });
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Mat};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Linear::zeros(2, 1);
        let mut g = Linear::zeros(2, 1);
        g.w[(0, 0)] = 3.0;
        g.w[(1, 0)] = -0.01;
        let mut opt = Adam::new(AdamConfig {
            clip_norm: None,
            ..AdamConfig::default()
        });
        opt.step(&mut p, &g);
        assert!((p.w[(0, 0)] + 1e-3).abs() < 1e-9);
        assert!((p.w[(1, 0)] - 1e-3).abs() < 1e-6);
        assert_eq!(p.b, Mat::zeros((1, 1)));
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Linear::zeros(1, 1);
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        });
        for _ in 0..2000 {
            let mut g = Linear::zeros(1, 1);
            g.w[(0, 0)] = 2.0 * (p.w[(0, 0)] - 3.0);
            g.b[(0, 0)] = 2.0 * (p.b[(0, 0)] + 1.0);
            opt.step(&mut p, &g);
        }
        assert!((p.w[(0, 0)] - 3.0).abs() < 1e-3);
        assert!((p.b[(0, 0)] + 1.0).abs() < 1e-3);
    }

    #[test]
    fn reports_unclipped_norm() {
        let mut p = Linear::zeros(1, 1);
        let mut g = Linear::zeros(1, 1);
        g.w[(0, 0)] = 3.0;
        g.b[(0, 0)] = 4.0;
        let mut opt = Adam::new(AdamConfig::default());
        assert_eq!(opt.step(&mut p, &g), 5.0);
    }
}
