//! Learning-rate schedule and Adam with two parameter groups.

use std::f64::consts::PI;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{Param, ParamGroup};

/// Linear warmup from 0.1·base to base over `warmup_fraction` of the horizon,
/// then cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_fraction: f64, base: f64) -> f64 {
    let total = total_steps.max(1) as f64;
    let step = (step as f64).min(total);
    let warm = warmup_fraction * total;
    if step < warm {
        base * (0.1 + 0.9 * step / warm)
    } else if total > warm {
        base * 0.5 * (1.0 + (PI * (step - warm) / (total - warm)).cos())
    } else {
        base
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
}

/// First and second moment estimates, one pair per parameter in store order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Param]) -> Result<Self> {
        let zeros = |p: &Param| p.var.as_tensor().zeros_like();
        Ok(Self {
            config,
            m: params.iter().map(zeros).collect::<candle_core::Result<_>>()?,
            v: params.iter().map(zeros).collect::<candle_core::Result<_>>()?,
            t: 0,
        })
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &[Param], grads: &GradStore, lr_backbone: f64, lr_modules: f64) -> Result<()> {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, p) in params.iter().enumerate() {
            let Some(g) = grads.get(p.var.as_tensor()) else { continue };
            let theta = p.var.as_tensor();
            let g = if weight_decay != 0.0 { (g + (theta * weight_decay)?)? } else { g.clone() };
            let m = ((&self.m[i] * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((&self.v[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let lr = match p.group {
                ParamGroup::Backbone => lr_backbone,
                ParamGroup::Modules => lr_modules,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + eps)?)?;
            p.var.set(&(theta - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_junction() {
        let base = 1e-4;
        assert!((lr_at(0, 1000, 0.1, base) - 0.1 * base).abs() < 1e-18);
        assert!((lr_at(100, 1000, 0.1, base) - base).abs() < 1e-18);
        assert!(lr_at(1000, 1000, 0.1, base).abs() < 1e-18);
        let before = lr_at(99, 1000, 0.1, base);
        let after = lr_at(101, 1000, 0.1, base);
        assert!((before - base).abs() < 1e-2 * base && (after - base).abs() < 1e-2 * base);
        let mut prev = f64::INFINITY;
        for s in 100..=1000 {
            let lr = lr_at(s, 1000, 0.1, base);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        use crate::nn::ParamStore;
        use candle_core::DType;
        let mut store = ParamStore::new(0, DType::F64);
        let w = store.constant("w", ParamGroup::Modules, &[3], 1.0).unwrap();
        let b = store.constant("b", ParamGroup::Backbone, &[1], 1.0).unwrap();
        let loss = (w.as_tensor().sum_all().unwrap() + (b.as_tensor().sum_all().unwrap() * -2.0).unwrap()).unwrap();
        let grads = loss.backward().unwrap();
        let cfg = AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let mut adam = Adam::new(cfg, store.params()).unwrap();
        adam.step(store.params(), &grads, 0.5, 0.1).unwrap();
        for x in w.to_vec1::<f64>().unwrap() {
            assert!((x - 0.9).abs() < 1e-6);
        }
        assert!((b.to_vec1::<f64>().unwrap()[0] - 1.5).abs() < 1e-6);
    }
}
