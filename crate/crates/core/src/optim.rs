//! First-order optimizer shared by the feature-field and detector trainers.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from the base rate to zero over the run.
    Cosine,
}

impl LrSchedule {
    pub fn rate(&self, base: f64, iteration: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = iteration as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }

    pub fn update(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let step = T::lit(lr * c2.sqrt() / c1);
        let eps = T::lit(self.eps);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine;
        assert_eq!(s.rate(0.1, 0, 100), 0.1);
        assert!((s.rate(0.1, 50, 100) - 0.05).abs() < 1e-15);
        assert!(s.rate(0.1, 100, 100).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = vec![3.0f64, -2.0];
        let mut opt = Adam::new(2);
        for i in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.update(&mut x, &g, LrSchedule::Cosine.rate(0.05, i, 2000));
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3));
    }
}
