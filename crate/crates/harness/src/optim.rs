//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::collections::BTreeMap;

use sdtr_model::ModelState;

use crate::config::{OptimizerConfig, Schedule};

/// Learning rate at `step` of `total` steps: starts at `lr`, and the cosine
/// schedule reaches `min_lr` one step past the last.
pub fn learning_rate(cfg: &OptimizerConfig, step: usize, total: usize) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => {
            let t = step.min(total) as f64 / total.max(1) as f64;
            cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Weight decay applies to matrices, kernels and embedding tables; biases,
/// normalization parameters, the class-weight vector and the reference
/// points (decay would pull them toward the ego origin) are exempt.
fn decays(name: &str, rank: usize) -> bool {
    rank >= 2 && !name.ends_with(".b") && name != "query.ref"
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimizerConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// entry are left untouched (no decay either).
    pub fn step(&mut self, state: &mut ModelState, grads: &BTreeMap<String, Vec<f64>>, lr: f64) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = state.get_mut(name);
            assert_eq!(p.len(), g.len(), "gradient size mismatch for {name}");
            let decay = decays(name, p.shape.len());
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                if decay {
                    p.data[i] -= lr * c.weight_decay * p.data[i];
                }
                p.data[i] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}
