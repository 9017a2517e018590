//! AdamW with a polynomial learning-rate schedule.

use alloc::vec::Vec;

// float intrinsics in no_std builds; std test builds shadow it
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{CoreError, Result};
use crate::param::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Polynomial decay power; lr falls as `lr * (1 - t/t_max)^power`.
    pub power: f64,
    pub t_max: usize,
}

impl AdamWConfig {
    pub fn new(lr: f64, t_max: usize) -> Self {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            power: 0.9,
            t_max,
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
pub struct AdamW<T> {
    cfg: AdamWConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: usize,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let m = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        let v = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        AdamW { cfg, m, v, step: 0 }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Learning rate applied at 0-based step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let frac = 1.0 - t as f64 / self.cfg.t_max as f64;
        self.cfg.lr * frac.max(0.0).powf(self.cfg.power)
    }

    /// One decoupled-weight-decay Adam update over every trainable param.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.step >= self.cfg.t_max {
            return Err(CoreError::StepBeyondHorizon {
                step: self.step,
                t_max: self.cfg.t_max,
            });
        }
        let lr = T::val(self.lr_at(self.step));
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::val(self.cfg.beta1);
        let b2 = T::val(self.cfg.beta2);
        let eps = T::val(self.cfg.eps);
        let wd = T::val(self.cfg.weight_decay);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let trainable = store.get(id).trainable;
            if !trainable {
                continue;
            }
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let p = store.get_mut(id);
            for i in 0..p.value.len() {
                let g = p.grad.data()[i];
                let mi = b1 * m.data()[i] + (T::one() - b1) * g;
                let vi = b2 * v.data()[i] + (T::one() - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let w = p.value.data()[i];
                p.value.data_mut()[i] = w - lr * (mhat / (vhat.sqrt() + eps) + wd * w);
            }
        }
        Ok(())
    }

    /// Restores serialized state (checkpoint resume).
    pub fn restore(&mut self, step: usize, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(crate::error::invalid(
                "optimizer_restore",
                "moment count mismatch",
            ));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::filled(&[3], 1.5)).unwrap();
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 10), &store);
        opt.step(&mut store).unwrap();
        assert!(store.value(id).data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn update_opposes_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(1.0)).unwrap();
        store.get_mut(id).grad = Tensor::scalar(1.0);
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 10), &store);
        opt.step(&mut store).unwrap();
        assert!(store.value(id).item() < 1.0);
    }

    #[test]
    fn fifty_steps_reach_quadratic_minimum() {
        // f(theta) = (theta - 3)^2, analytic grad 2(theta - 3)
        let mut store = ParamStore::<f64>::new();
        let id = store.add("theta", Tensor::scalar(0.0)).unwrap();
        let mut opt = AdamW::new(AdamWConfig::new(0.3, 50), &store);
        for _ in 0..50 {
            let theta = store.value(id).item();
            store.zero_grads();
            store.get_mut(id).grad = Tensor::scalar(2.0 * (theta - 3.0));
            opt.step(&mut store).unwrap();
        }
        let theta = store.value(id).item();
        assert!((theta - 3.0).abs() < 0.5, "theta = {theta}");
    }

    #[test]
    fn step_beyond_horizon_errors() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::scalar(0.0)).unwrap();
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 2), &store);
        opt.step(&mut store).unwrap();
        opt.step(&mut store).unwrap();
        assert!(matches!(
            opt.step(&mut store),
            Err(CoreError::StepBeyondHorizon { .. })
        ));
    }

    #[test]
    fn lr_follows_polynomial_decay() {
        let store = ParamStore::<f64>::new();
        let opt = AdamW::new(AdamWConfig::new(1.0, 100), &store);
        assert!((opt.lr_at(0) - 1.0).abs() < 1e-12);
        let mid = opt.lr_at(50);
        assert!((mid - 0.5f64.powf(0.9)).abs() < 1e-12);
        assert!(opt.lr_at(100) == 0.0);
    }

    #[test]
    fn weight_decay_shrinks_weights_without_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(2.0)).unwrap();
        let mut cfg = AdamWConfig::new(0.1, 10);
        cfg.weight_decay = 0.5;
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store).unwrap();
        let w = store.value(id).item();
        assert!(w < 2.0 && (w - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }
}
