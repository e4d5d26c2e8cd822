//! AdamW and global-norm gradient clipping.

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Per-parameter moments and the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Updates applied so far to each parameter, for bias correction.
    steps: Vec<u64>,
}

impl AdamW {
    pub fn new<T: Scalar>(config: AdamWConfig, params: &ParamSet<T>) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            steps: vec![0; params.len()],
        }
    }

    pub fn steps(&self, id: ParamId) -> u64 {
        self.steps[id.0]
    }

    /// One update of the parameters in `active` from their `grad` buffers.
    /// Parameters outside `active` (no gradient reached them) are left
    /// untouched, including their moments and weight decay.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamSet<T>, active: &[ParamId], lr: f64) -> Result<()> {
        for &id in active {
            let p = params.get(id);
            if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in {} at element {i}", p.name)));
            }
        }
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        for &id in active {
            let t = {
                self.steps[id.0] += 1;
                self.steps[id.0] as i32
            };
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let p = params.get_mut(id);
            let decay = if p.decay { 1.0 - lr * weight_decay } else { 1.0 };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (((w, g), m), v) in p.value.data.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *w = T::cast(w.as_f64() * decay - update);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm<T: Scalar>(params: &ParamSet<T>) -> f64 {
    params.iter().flat_map(|p| &p.grad).map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt()
}

/// Rescales every gradient so the global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(params: &mut ParamSet<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::cast(g.as_f64() * scale));
        }
    }
    norm
}
