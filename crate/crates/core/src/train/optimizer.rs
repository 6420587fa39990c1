use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Grads, ParamStore, Partition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub decay_every_epochs: usize,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            initial_lr: 0.01,
            lr_decay_factor: 0.3,
            decay_every_epochs: 2,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.0005,
            stage1_epochs: 4,
            stage2_epochs: 3,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return Err(Error::config("initial_lr must be positive"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::config("lr_decay_factor must lie in (0, 1)"));
        }
        if self.decay_every_epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("decay_every_epochs and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::config("momentum must lie in [0, 1) and weight_decay be non-negative"));
        }
        Ok(())
    }

    /// `lr(e) = initial_lr · factor^⌊e / decay_every⌋`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * self.lr_decay_factor.powi((epoch / self.decay_every_epochs) as i32)
    }
}

/// SGD with (Nesterov) momentum and L2 weight decay. Frozen partitions are
/// skipped entirely: no decay, no velocity update, no write.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
    frozen: Vec<Partition>,
    skipped: Vec<bool>,
}

impl Sgd {
    pub fn new(ps: &ParamStore, cfg: &OptimizerConfig) -> Self {
        Sgd {
            momentum: cfg.momentum,
            nesterov: cfg.nesterov,
            weight_decay: cfg.weight_decay,
            velocity: ps.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            frozen: Vec::new(),
            skipped: vec![false; ps.len()],
        }
    }

    pub fn freeze(&mut self, parts: &[Partition]) {
        for &p in parts {
            if !self.frozen.contains(&p) {
                self.frozen.push(p);
            }
        }
    }

    /// Leaves every tensor whose name starts with `prefix` untouched.
    pub fn skip_prefix(&mut self, ps: &ParamStore, prefix: &str) {
        self.skip_where(ps, |n| n.starts_with(prefix));
    }

    pub fn skip_where(&mut self, ps: &ParamStore, pred: impl Fn(&str) -> bool) {
        for id in ps.ids() {
            if pred(ps.name(id)) {
                self.skipped[id.0] = true;
            }
        }
    }

    pub fn is_frozen(&self, p: Partition) -> bool {
        self.frozen.contains(&p)
    }

    pub fn step(&mut self, ps: &mut ParamStore, grads: &Grads, lr: f64) {
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            if self.skipped[id.0] || self.is_frozen(ps.partition(id)) {
                continue;
            }
            let g = grads.get(id);
            let v = &mut self.velocity[id.0];
            let p = ps.get_mut(id);
            for i in 0..p.len() {
                let mut d = g[i] + self.weight_decay * p[i];
                if self.momentum != 0.0 {
                    v[i] = self.momentum * v[i] + d;
                    d = if self.nesterov { d + self.momentum * v[i] } else { v[i] };
                }
                p[i] -= lr * d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    #[test]
    fn schedule_values() {
        let cfg = OptimizerConfig::default();
        let lrs: Vec<f64> = (0..4).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(lrs[0], 0.01);
        assert_eq!(lrs[1], 0.01);
        assert!((lrs[2] - 0.003).abs() < 1e-15);
        assert!((lrs[3] - 0.003).abs() < 1e-15);
    }

    #[test]
    fn plain_step_and_freeze() {
        let mut ps = ParamStore::new();
        let a = ps.register("fcn.a", &[1], Init::FanIn(1), 4);
        let b = ps.register("backbone.b", &[1], Init::FanIn(1), 4);
        let cfg = OptimizerConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = Sgd::new(&ps, &cfg);
        opt.freeze(&[Partition::Backbone]);
        let (a0, b0) = (ps.get(a)[0], ps.get(b)[0]);
        let mut g = ps.zero_grads();
        g.get_mut(a)[0] = 0.5;
        g.get_mut(b)[0] = 0.5;
        opt.step(&mut ps, &g, 0.1);
        assert_eq!(ps.get(a)[0], a0 - 0.1 * 0.5);
        assert_eq!(ps.get(b)[0].to_bits(), b0.to_bits());
    }
}
