//! AdamW, the warmup schedule and gradient clipping.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::params::{Grads, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied only to parameters marked for decay.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store
            .iter()
            .map(|(_, p)| Mat::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every trainable parameter with learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.t as f64);
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let i = id.index();
            let g = grads.get(id).data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let decay = if p.decay { c.weight_decay } else { 0.0 };
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w -= lr * (mhat / (libm::sqrt(vhat) + c.eps) + decay * *w);
            }
        }
    }
}

/// Linear ramp from 0 to `target` over `warmup_steps`, then constant.
pub fn lr_schedule(step: usize, warmup_steps: usize, target: f64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        target
    } else {
        target * step as f64 / warmup_steps as f64
    }
}

/// `round(fraction * total_steps)`.
pub fn warmup_steps(total_steps: usize, fraction: f64) -> usize {
    libm::round(total_steps as f64 * fraction) as usize
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm.is_finite() {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn schedule_shape() {
        let warm = warmup_steps(1000, 0.05);
        assert_eq!(warm, 50);
        assert_eq!(lr_schedule(0, warm, 1e-4), 0.0);
        assert_eq!(lr_schedule(25, warm, 1e-4), 5e-5);
        assert_eq!(lr_schedule(warm, warm, 1e-4), 1e-4);
        assert_eq!(lr_schedule(1000, warm, 1e-4), 1e-4);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::row_vector(alloc::vec![1.0, -2.0]), false);
        let frozen = store.add("f", Mat::row_vector(alloc::vec![3.0]), false);
        store.set_trainable(frozen, false);
        let mut grads = Grads::zeros_like(&store);
        grads.get_mut(w).data_mut().copy_from_slice(&[0.5, -4.0]);
        grads.get_mut(frozen).data_mut()[0] = 1.0;
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, &grads, 0.1);
        let v = store.get(w).data();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 1.9).abs() < 1e-6);
        assert_eq!(store.get(frozen).data()[0], 3.0);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::zeros(1, 2), true);
        let mut grads = Grads::zeros_like(&store);
        grads.get_mut(w).data_mut().copy_from_slice(&[3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }
}
