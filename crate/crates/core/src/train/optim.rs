use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::numerics::Tensor;

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
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive moments with decoupled weight decay.
///
/// Biases, norm gains and the aggregation variances are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

fn decays(name: &str) -> bool {
    !(name.ends_with(".b") || name.ends_with(".g") || name.starts_with("nga."))
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every non-frozen entry of `store` that has a
    /// gradient in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, param) in store.iter_mut() {
            if param.frozen {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let n = g.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let decay = if decays(name) { c.lr * c.weight_decay } else { 0.0 };
            let w = param.value.data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= decay * w[i] + c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("x.w", Tensor::vector(vec![1.0, -1.0]).unwrap());
        store.insert("x.b", Tensor::vector(vec![0.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("x.w".to_string(), Tensor::vector(vec![0.5, -2.0]).unwrap());
        grads.insert("x.b".to_string(), Tensor::vector(vec![3.0]).unwrap());
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut store, &grads);
        let w = store.tensor("x.w").unwrap().data().to_vec();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn frozen_and_undecayed_entries() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::vector(vec![1.0]).unwrap());
        store.insert("nga.sigma.rho", Tensor::vector(vec![1.0]).unwrap());
        store.get_mut("a.w").unwrap().frozen = true;
        let mut grads = BTreeMap::new();
        grads.insert("a.w".to_string(), Tensor::vector(vec![1.0]).unwrap());
        grads.insert("nga.sigma.rho".to_string(), Tensor::vector(vec![0.0]).unwrap());
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut store, &grads);
        assert_eq!(store.tensor("a.w").unwrap().data(), &[1.0]);
        assert_eq!(store.tensor("nga.sigma.rho").unwrap().data(), &[1.0]);
    }
}
