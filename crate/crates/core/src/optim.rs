//! Optimization: decoupled-weight-decay adaptive-moment updates with bias
//! correction, and the cosine annealing learning-rate schedule.

use crate::error::{EngineError, Result};
use crate::tape::{check_grads_finite, ParamId, ParamStore};
use crate::tensor::PotentialTensor;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    /// Cosine schedule horizon; the run may stop earlier (`steps <= schedule_max`).
    pub schedule_max: usize,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub relaxation_mode: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(EngineError::InvalidConfig("lr must be > 0".into()));
        }
        if self.steps > self.schedule_max {
            return Err(EngineError::InvalidConfig(format!(
                "steps {} exceed schedule_max {}",
                self.steps, self.schedule_max
            )));
        }
        Ok(())
    }
}

/// base_lr * (1 + cos(pi * step / total)) / 2
pub fn cosine_lr(step: usize, total: usize, base_lr: f64) -> Result<f64> {
    if step > total || total == 0 {
        return Err(EngineError::InvalidConfig(format!(
            "step {step} outside schedule 0..{total}"
        )));
    }
    Ok(base_lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()) / 2.0)
}

/// AdamW. Moment state is laid out per parameter id; updates are
/// deterministic given the same gradient maps in the same order.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<ParamId, Vec<f64>>,
    v: BTreeMap<ParamId, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every parameter present in `grads`. Parameters not in
    /// the map (frozen or unused this step) are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<ParamId, PotentialTensor>,
        lr: f64,
    ) -> Result<()> {
        check_grads_finite(store, grads)?;
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (&id, g) in grads {
            let n = store.get(id).len();
            let m = self.m.entry(id).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(id).or_insert_with(|| vec![0.0; n]);
            let p = &mut store.get_mut(id).data;
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g.data[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g.data[i] * g.data[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 0.1).unwrap(), 0.1);
        assert!(cosine_lr(100, 100, 0.1).unwrap().abs() < 1e-17);
        assert!((cosine_lr(50, 100, 0.1).unwrap() - 0.05).abs() < 1e-12);
        assert!(cosine_lr(101, 100, 0.1).is_err());
    }

    #[test]
    fn zero_grads_leave_params_unchanged_without_decay() {
        let mut store = ParamStore::new();
        let id = store.add(
            "p",
            PotentialTensor::from_vec(&[2], vec![1.0, -2.0]).unwrap(),
        );
        let mut opt = AdamW::new(0.0);
        let mut grads = BTreeMap::new();
        grads.insert(id, PotentialTensor::zeros(&[2]));
        opt.step(&mut store, &grads, 0.1).unwrap();
        assert_eq!(store.get(id).data, vec![1.0, -2.0]);
    }

    #[test]
    fn quadratic_converges() {
        // minimize (x - 3)^2
        let mut store = ParamStore::new();
        let id = store.add("x", PotentialTensor::from_vec(&[1], vec![-5.0]).unwrap());
        let mut opt = AdamW::new(0.0);
        for _ in 0..200 {
            let x = store.get(id).data[0];
            let mut grads = BTreeMap::new();
            grads.insert(
                id,
                PotentialTensor::from_vec(&[1], vec![2.0 * (x - 3.0)]).unwrap(),
            );
            opt.step(&mut store, &grads, 0.1).unwrap();
        }
        assert!((store.get(id).data[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let run = || {
            let mut store = ParamStore::new();
            let id = store.add("x", PotentialTensor::from_vec(&[1], vec![2.0]).unwrap());
            let mut opt = AdamW::new(0.01);
            for s in 0..50 {
                let x = store.get(id).data[0];
                let mut grads = BTreeMap::new();
                grads.insert(
                    id,
                    PotentialTensor::from_vec(&[1], vec![(x + s as f64 * 0.1).sin()]).unwrap(),
                );
                opt.step(&mut store, &grads, 0.05).unwrap();
            }
            store.get(id).data[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut store = ParamStore::new();
        let id = store.add("p", PotentialTensor::from_vec(&[1], vec![0.0]).unwrap());
        let mut opt = AdamW::new(0.0);
        let mut grads = BTreeMap::new();
        grads.insert(id, PotentialTensor::from_vec(&[1], vec![f64::NAN]).unwrap());
        assert!(opt.step(&mut store, &grads, 0.1).is_err());
    }
}
