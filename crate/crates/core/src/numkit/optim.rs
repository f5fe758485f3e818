use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for one parameter.
#[derive(Debug, Clone, Default)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// One AdamW update of a single parameter at step `t` (1-based).
///
/// Weight decay is decoupled: `θ ← θ − lr·wd·θ` happens before, and
/// independently of, the bias-corrected Adam step.
pub fn adamw_step<T: Real>(
    theta: &mut [T],
    grad: &[T],
    state: &mut Moments<T>,
    cfg: &AdamWConfig,
    t: u64,
) {
    assert!(t >= 1, "AdamW step counter starts at 1");
    assert_eq!(theta.len(), grad.len());
    if state.m.len() != theta.len() {
        state.m = vec![T::zero(); theta.len()];
        state.v = vec![T::zero(); theta.len()];
    }
    let lr = T::lit(cfg.lr);
    let decay = T::lit(cfg.lr * cfg.weight_decay);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::lit(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(t as i32));
    let eps = T::lit(cfg.eps);
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let (inv1, inv2) = (bc1.recip(), bc2.recip());
    for (((th, &g), m), v) in theta.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *th -= decay * *th;
        *m = b1 * *m + c1 * g;
        *v = b2 * *v + c2 * g * g;
        *th -= lr * (*m * inv1) / ((*v * inv2).sqrt() + eps);
    }
}

/// AdamW over a whole [`ParamStore`], reading gradients from `tensor.grad`.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that carries a
    /// gradient. Parameters without a gradient this step still decay.
    pub fn step(&mut self, params: &mut ParamStore<T>) {
        self.step += 1;
        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let grad = p
                .tensor
                .grad
                .take()
                .unwrap_or_else(|| vec![T::zero(); p.tensor.numel()]);
            let state = self.state.entry(p.name.clone()).or_default();
            adamw_step(p.tensor.data_mut(), &grad, state, &self.config, self.step);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Tensor;

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut theta = vec![1.5f64, -2.0, 0.25];
        let before = theta.clone();
        let mut st = Moments::default();
        adamw_step(&mut theta, &[0.0; 3], &mut st, &cfg, 1);
        assert_eq!(theta, before);
    }

    #[test]
    fn single_step_closed_form_with_zero_betas() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
        };
        let (theta0, g) = (2.0f64, -0.3f64);
        let mut theta = vec![theta0];
        adamw_step(&mut theta, &[g], &mut Moments::default(), &cfg, 1);
        let expected = theta0 - 0.1 * 0.5 * theta0 - 0.1 * g / (g.abs() + 1e-8);
        assert!((theta[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        let cfg = AdamWConfig {
            lr: 0.0,
            ..Default::default()
        };
        let mut store = ParamStore::<f32>::new();
        store
            .insert("w", Tensor::from_rows(1, 3, vec![0.5, -1.0, 3.0]))
            .unwrap();
        store.get_mut("w").unwrap().tensor.grad = Some(vec![1.0, 2.0, -3.0]);
        let before = store.tensor("w").data().to_vec();
        let mut opt = AdamW::new(cfg);
        opt.step(&mut store);
        opt.step(&mut store);
        assert_eq!(store.tensor("w").data(), &before[..]);
    }

    #[test]
    fn defaults_match_training_settings() {
        let c = AdamWConfig::default();
        assert_eq!((c.lr, c.weight_decay), (2e-3, 1e-2));
        assert_eq!((c.beta1, c.beta2, c.eps), (0.9, 0.999, 1e-8));
    }
}
