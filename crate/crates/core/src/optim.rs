//! AdamW with per-group learning rates.

use std::collections::HashMap;

use crate::params::{Group, ParamStore};

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr_encoder: f32,
    pub lr_head: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Linear warmup length in steps (0 disables).
    pub warmup: u64,
    /// Global gradient-norm clip (0 disables).
    pub clip_norm: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr_encoder: 1e-4,
            lr_head: 8e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup: 0,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    moments: HashMap<usize, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn lr(&self, group: Group) -> f32 {
        let base = match group {
            Group::Encoder => self.cfg.lr_encoder,
            Group::Head => self.cfg.lr_head,
        };
        if self.cfg.warmup > 0 && self.step < self.cfg.warmup {
            base * self.step as f32 / self.cfg.warmup as f32
        } else {
            base
        }
    }

    /// One update from the accumulated gradients, then clears them.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let clip = if self.cfg.clip_norm > 0.0 {
            let sq: f64 = store
                .iter()
                .filter_map(|(_, p)| p.tensor.grad())
                .flat_map(|g| g.iter().map(|&v| (v as f64) * (v as f64)))
                .sum();
            let norm = sq.sqrt() as f32;
            if norm > self.cfg.clip_norm {
                self.cfg.clip_norm / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let lrs = (self.lr(Group::Encoder), self.lr(Group::Head));
        for (idx, p) in store.iter_mut().enumerate() {
            let Some(grad) = p.tensor.grad().map(|g| g.to_vec()) else { continue };
            let lr = match p.group {
                Group::Encoder => lrs.0,
                Group::Head => lrs.1,
            };
            let decay = if p.tensor.shape().len() >= 2 { self.cfg.weight_decay } else { 0.0 };
            let n = grad.len();
            let (m, v) = self.moments.entry(idx).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let data = p.tensor.data_mut();
            for i in 0..n {
                let gi = grad[i] * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + decay * data[i]);
            }
            p.tensor.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.register("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap(), Group::Head);
        let mut opt = AdamW::new(AdamWConfig {
            lr_head: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = store.leaf(&mut g, id);
            let sq = g.mul(x, x).unwrap();
            let l = g.sum(sq);
            g.backward(l).unwrap();
            store.accumulate(&g);
            drop(g);
            opt.step(&mut store);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }
}
