//! Linear warmup, then cosine annealing with warm restarts.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    /// Length of the first cosine cycle, in steps.
    pub period: usize,
    /// Each cycle is `restart_mult` times longer than the previous one.
    pub restart_mult: f64,
    pub min_lr_fraction: f64,
}

impl Schedule {
    /// Learning rate at `step`. Rises linearly from 0 to `base_lr` over the
    /// warmup, then follows cosine cycles from `base_lr` down toward
    /// `min_lr_fraction · base_lr`, restarting at `base_lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let mut pos = (step - self.warmup_steps) as f64;
        let mut len = self.period.max(1) as f64;
        if self.restart_mult == 1.0 {
            pos %= len;
        } else {
            while pos >= len {
                pos -= len;
                len *= self.restart_mult;
            }
        }
        if pos == 0.0 {
            return self.base_lr;
        }
        let u = pos / len;
        let min_lr = self.min_lr_fraction * self.base_lr;
        min_lr + (self.base_lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
    }
}
