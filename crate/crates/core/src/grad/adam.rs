//! Adam optimizer with decoupled weight decay.
//!
//! Update rule per parameter tensor, with a step counter shared across all
//! tensors in one [`AdamState`]:
//!
//! ```text
//! m <- b1 * m + (1 - b1) * g          mhat = m / (1 - b1^t)
//! v <- b2 * v + (1 - b2) * g^2        vhat = v / (1 - b2^t)
//! p <- p - lr * mhat / (sqrt(vhat) + eps) - lr * wd * p
//! ```
//!
//! The decay term multiplies the parameter directly (decoupled from the
//! adaptive rescaling), so it acts as a true shrinkage independent of the
//! gradient magnitudes.

use crate::real::{r, Real};

/// Optimizer hyperparameters. The defaults are the training settings used
/// throughout this project's experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight-decay coefficient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.98, eps: 1e-9, weight_decay: 1e-4 }
    }
}

/// First/second-moment state for a fixed set of parameter tensors.
pub struct AdamState<T: Real> {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    /// One moment buffer per parameter tensor, sized by `lens`.
    pub fn new(cfg: AdamConfig, lens: &[usize]) -> Self {
        Self {
            cfg,
            step: 0,
            m: lens.iter().map(|&l| vec![T::zero(); l]).collect(),
            v: lens.iter().map(|&l| vec![T::zero(); l]).collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params[k]` and `grads[k]` must line up with the
    /// `lens` this state was created with, in the same order every call.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) {
        assert_eq!(params.len(), self.m.len(), "parameter tensor count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient tensor count changed");
        self.step += 1;
        let t = self.step as i32;
        let b1: T = r(self.cfg.beta1);
        let b2: T = r(self.cfg.beta2);
        let one = T::one();
        let bias1 = one / (one - b1.powi(t));
        let bias2 = one / (one - b2.powi(t));
        let lr: T = r(self.cfg.lr);
        let eps: T = r(self.cfg.eps);
        let decay: T = r(self.cfg.lr * self.cfg.weight_decay);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.len(), m.len(), "parameter tensor length changed");
            assert_eq!(g.len(), m.len(), "gradient tensor length changed");
            for i in 0..m.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mhat = m[i] * bias1;
                let vhat = v[i] * bias2;
                p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps) - decay * p[i];
            }
        }
    }
}
