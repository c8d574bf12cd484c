use serde::{Deserialize, Serialize};

use crate::tensor::{Gradients, Matrix, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = grads.global_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let (rows, cols) = g.shape();
            let m = self.m[i].get_or_insert_with(|| Matrix::zeros(rows, cols));
            let v = self.v[i].get_or_insert_with(|| Matrix::zeros(rows, cols));
            let p = store.get_mut(id);
            for k in 0..g.data.len() {
                let gk = g.data[k] * clip;
                m.data[k] = beta1 * m.data[k] + (1.0 - beta1) * gk;
                v.data[k] = beta2 * v.data[k] + (1.0 - beta2) * gk * gk;
                let mhat = m.data[k] / bc1;
                let vhat = v.data[k] / bc2;
                p.data[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::from_vec(1, 2, vec![0.5, -1.0]));
        let before = store.clone();
        let mut grads = Gradients::new(1);
        grads.accumulate(id, &Matrix::from_vec(1, 2, vec![3.0, -2.0]));
        let mut adam = Adam::new(AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        });
        adam.step(&mut store, &grads);
        assert_eq!(store, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::from_vec(1, 2, vec![0.0, 0.0]));
        let mut grads = Gradients::new(1);
        grads.accumulate(id, &Matrix::from_vec(1, 2, vec![0.3, -0.2]));
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            clip_norm: None,
            ..AdamConfig::default()
        });
        adam.step(&mut store, &grads);
        let w = &store.get(id).data;
        assert!((w[0] + 0.1).abs() < 1e-6 && (w[1] - 0.1).abs() < 1e-6);
    }
}
