//! Learning-rate schedule and the AdamW optimizer.

use std::collections::BTreeMap;

use depthdiff_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Module, ParamVisitor};

/// From `epoch` on, the learning rate is `factor * lr0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub epoch: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr0: f64,
    pub warmup_epochs: usize,
    pub decay: Vec<DecayPoint>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            lr0: 1e-3,
            warmup_epochs: 1,
            decay: vec![DecayPoint { epoch: 10, factor: 0.2 }, DecayPoint { epoch: 15, factor: 0.04 }],
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        let mut prev = (0, 1.0);
        for d in &self.decay {
            if d.epoch <= prev.0 || !(d.factor > 0.0) || d.factor > prev.1 {
                return Err(Error::Config(
                    "decay points need increasing epochs and positive, non-increasing factors".into(),
                ));
            }
            prev = (d.epoch, d.factor);
        }
        Ok(())
    }

    /// Learning rate at a 1-based `epoch` and 0-based `step` within it.
    /// Warm-up ramps linearly from 0 across the first `warmup_epochs`.
    pub fn lr_at(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> f64 {
        let epoch = epoch.max(1);
        if epoch <= self.warmup_epochs {
            let done = (epoch - 1) * steps_per_epoch + step;
            let total = self.warmup_epochs * steps_per_epoch.max(1);
            return self.lr0 * done as f64 / total as f64;
        }
        let factor = self.decay.iter().filter(|d| d.epoch <= epoch).map(|d| d.factor).next_back();
        match factor {
            Some(f) => self.lr0 * f,
            None => self.lr0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay: `p <- p - lr (m̂ / (√v̂ + ε) + wd p)`.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, t: 0, moments: BTreeMap::new() }
    }

    /// Applies one update to every parameter of `model` from its accumulated
    /// gradients, then clears them. Parameters without a gradient are still
    /// decayed.
    pub fn step(&mut self, model: &mut dyn Module, lr: f64) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let moments = &mut self.moments;
        model.visit_params(&mut ParamVisitor::new(&mut |name, p| {
            let n = p.numel();
            let (m, v) = moments.entry(name.to_string()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let g = p.grad().unwrap_or_else(|| vec![0.0; n]);
            let data: Vec<f64> = p
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                    let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                    x - lr * (update + c.weight_decay * x)
                })
                .collect();
            *p = Tensor::param(p.shape(), data).expect("finite update of finite parameters");
        }));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_fixtures() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(1, 0, 100), 0.0);
        assert_eq!(s.lr_at(1, 50, 100), 5e-4);
        for e in 2..10 {
            assert_eq!(s.lr_at(e, 3, 100), 1e-3);
        }
        assert_eq!(s.lr_at(12, 0, 100), 2e-4);
        assert_eq!(s.lr_at(20, 0, 100), 4e-5);
        let bad = LrSchedule { decay: vec![DecayPoint { epoch: 5, factor: 0.1 }, DecayPoint { epoch: 6, factor: 0.5 }], ..s };
        assert!(bad.validate().is_err());
    }

    struct One(Tensor);

    impl Module for One {
        fn visit_params(&mut self, v: &mut ParamVisitor<'_>) {
            v.param("x", &mut self.0);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * sign(g) (for |g| >> eps).
        let mut m = One(Tensor::param(&[2], vec![1.0, -1.0]).unwrap());
        m.0.square().unwrap().sum().unwrap().backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut m, 0.1);
        let x = m.0.to_vec();
        assert!((x[0] - 0.9).abs() < 1e-7 && (x[1] + 0.9).abs() < 1e-7, "{x:?}");
    }

    #[test]
    fn decay_without_gradient() {
        let mut m = One(Tensor::param(&[1], vec![2.0]).unwrap());
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..Default::default() });
        opt.step(&mut m, 0.1);
        assert_eq!(m.0.item(), 2.0 - 0.1 * 0.5 * 2.0);
    }
}
