//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update of every parameter that has a gradient. Parameters without
    /// an entry in `grads` are left untouched.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<f32>>,
        grads: &BTreeMap<String, Tensor<f32>>,
    ) -> Result<()> {
        if !(self.config.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {}", self.config.lr)));
        }
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            let p = params.get(name).ok_or_else(|| Error::Missing(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(shape_err!("gradient {:?} for parameter `{name}` of shape {:?}", g.shape(), p.shape()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = gv as f64;
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = (*pv as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }
}

/// Step-decay schedule: the base rate is halved at each milestone reached.
pub fn halving_schedule(base_lr: f64, milestones: &[usize], iteration: usize) -> f64 {
    let passed = milestones.iter().filter(|&&m| iteration >= m).count();
    base_lr / 2f64.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f32) -> BTreeMap<String, Tensor<f32>> {
        BTreeMap::from([(name.to_string(), Tensor::new([1], vec![v]).unwrap())])
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = one("w", 0.7);
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-3));
        adam.step(&mut p, &one("w", 0.0)).unwrap();
        assert_eq!(p["w"].data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g = 1, v̂ = g² = 1, Δ = −lr·1/(1 + 1e−8)
        let mut p = one("w", 0.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-3));
        adam.step(&mut p, &one("w", 1.0)).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p["w"].data()[0] as f64 - expected).abs() < 1e-9);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut p = one("w", 0.3);
            let mut adam = AdamState::new(AdamConfig::with_lr(1e-2));
            adam.step(&mut p, &one("w", 0.25)).unwrap();
            adam.step(&mut p, &one("w", -0.5)).unwrap();
            (p, adam)
        };
        let (p1, a1) = run();
        let (p2, a2) = run();
        assert_eq!(p1["w"].data()[0].to_bits(), p2["w"].data()[0].to_bits());
        assert_eq!(a1, a2);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = one("dec.w", 0.3);
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-2));
        let err = adam.step(&mut p, &one("dec.w", f32::NAN)).unwrap_err();
        assert!(err.to_string().contains("dec.w"));
    }

    #[test]
    fn schedule_halves_at_milestones() {
        assert_eq!(halving_schedule(2e-3, &[700, 750], 0), 2e-3);
        assert_eq!(halving_schedule(2e-3, &[700, 750], 700), 1e-3);
        assert_eq!(halving_schedule(2e-3, &[700, 750], 799), 5e-4);
    }
}
