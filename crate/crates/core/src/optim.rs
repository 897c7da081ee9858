//! Adam with decoupled weight decay, the polynomial learning-rate schedule
//! and training-loss early stopping.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Optimizer state. Moments are kept per trainable parameter, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let shapes: Vec<usize> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.value.numel())
            .collect();
        Self {
            cfg,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update using the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - libm::pow(beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.step as f64);
        let trainable = store.iter_mut().filter(|p| p.trainable);
        for ((p, m), v) in trainable.zip(&mut self.m).zip(&mut self.v) {
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let g = p.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (libm::sqrt(vhat) + eps) + weight_decay * data[i]);
            }
        }
    }
}

/// `lr0 · (1 − epoch / max_epoch)^power`.
pub fn lr_at(epoch: usize, max_epoch: usize, lr0: f64, power: f64) -> Result<f64> {
    if max_epoch == 0 || epoch > max_epoch {
        return Err(Error::Input(alloc::format!(
            "epoch {epoch} outside [0, {max_epoch}]"
        )));
    }
    Ok(lr0 * libm::pow(1.0 - epoch as f64 / max_epoch as f64, power))
}

/// Stops when the monitored loss has not decreased for `patience` epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records an epoch's loss; returns true when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn poly_schedule_values() {
        assert_eq!(lr_at(0, 300, 1e-3, 0.9).unwrap(), 1e-3);
        assert_eq!(lr_at(300, 300, 1e-3, 0.9).unwrap(), 0.0);
        let mid = lr_at(150, 300, 1e-3, 0.9).unwrap();
        assert!((mid - 5.3589e-4).abs() < 1e-8, "{mid}");
        assert!(lr_at(301, 300, 1e-3, 0.9).is_err());
    }

    #[test]
    fn early_stopping_counts_stale_epochs() {
        let mut es = EarlyStopping::new(3);
        assert!(!es.observe(1.0));
        assert!(!es.observe(1.0));
        assert!(!es.observe(1.0));
        assert!(es.observe(1.0));
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[1], 3.0), true);
        let mut opt = Adam::new(AdamConfig { weight_decay: 0.0, ..Default::default() }, &store);
        for _ in 0..2000 {
            store.zero_grad();
            let w = store.get(id).value.item();
            store.get_mut(id).grad[0] = 2.0 * w;
            opt.step(&mut store, 1e-2);
        }
        assert!(store.get(id).value.item().abs() < 1e-2);
    }

    #[test]
    fn zero_lr_leaves_weights_untouched() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[2], 0.7), true);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        store.get_mut(id).grad = alloc::vec![1.0, -1.0];
        opt.step(&mut store, 0.0);
        assert_eq!(store.get(id).value.data(), &[0.7, 0.7]);
    }
}
