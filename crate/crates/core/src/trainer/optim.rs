use serde::{Deserialize, Serialize};

use crate::diffmath::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Anneal the step size to zero over the run with a half cosine.
    pub cosine: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            cosine: true,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    /// Step size for update `step` of `total` (both zero-based counts).
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if !self.cosine || total == 0 {
            return self.lr;
        }
        let frac = (step as f64 / total as f64).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// First and second moment estimates for a list of tensors.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v) = shapes.into_iter().map(|(r, c)| (Tensor::zeros(r, c), Tensor::zeros(r, c))).unzip();
        Self { config, m, v, t: 0 }
    }

    pub fn steps_taken(&self) -> usize {
        self.t as usize
    }

    /// One bias-corrected update of `params` from `grads` at step size `lr`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let one = T::one();
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let step = T::lit(lr * bc2.sqrt() / bc1);
        let eps = T::lit(c.eps * bc2.sqrt());
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let pd = p.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (one - b1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (one - b2) * gi * gi;
                pd[i] -= step * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let c = AdamConfig::default();
        assert_eq!(c.lr_at(0, 100), 1e-3);
        assert!((c.lr_at(50, 100) - 5e-4).abs() < 1e-15);
        assert!(c.lr_at(100, 100).abs() < 1e-18);
        let flat = AdamConfig { cosine: false, ..c };
        assert_eq!(flat.lr_at(99, 100), 1e-3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction the first update is lr * sign(g)
        let mut x = Tensor::<f64>::vector(vec![1.0, -2.0]);
        let g = Tensor::vector(vec![0.3, -5.0]);
        let mut adam = Adam::new(AdamConfig::default(), [x.shape()]);
        adam.step(&mut [&mut x], &[&g], 0.1);
        assert!((x.data()[0] - 0.9).abs() < 1e-6);
        assert!((x.data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = Tensor::<f64>::vector(vec![3.0, -4.0]);
        let mut adam = Adam::new(AdamConfig::default(), [x.shape()]);
        for _ in 0..2000 {
            let g = x.map(|v| 2.0 * v);
            adam.step(&mut [&mut x], &[&g], 0.05);
        }
        assert!(x.frobenius_norm() < 1e-3);
    }
}
