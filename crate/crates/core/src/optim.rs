//! Adaptive-moment optimizers and learning-rate schedules.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::towers::Params;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-6, weight_decay: 0.1 }
    }
}

impl AdamConfig {
    pub fn without_decay() -> Self {
        AdamConfig { weight_decay: 0.0, beta2: 0.999, eps: 1e-8, ..Self::default() }
    }
}

/// First and second moments of one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: u32,
}

impl<T: Real> Moments<T> {
    pub fn new(n: usize) -> Self {
        Moments { m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    /// One update. `ascend` flips the gradient sign; `decay` applies decoupled weight decay.
    pub fn step(&mut self, x: &mut [T], g: &[T], lr: f64, cfg: &AdamConfig, decay: bool, ascend: bool) {
        assert_eq!(x.len(), self.m.len());
        assert_eq!(g.len(), self.m.len());
        self.t += 1;
        let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
        let c1 = T::c(1.0 - cfg.beta1.powi(self.t as i32));
        let c2 = T::c(1.0 - cfg.beta2.powi(self.t as i32));
        let (lr_t, eps) = (T::c(lr), T::c(cfg.eps));
        let shrink = T::c(1.0 - lr * cfg.weight_decay);
        let one = T::one();
        for i in 0..x.len() {
            let gi = if ascend { -g[i] } else { g[i] };
            self.m[i] = b1 * self.m[i] + (one - b1) * gi;
            self.v[i] = b2 * self.v[i] + (one - b2) * gi * gi;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            if decay {
                x[i] *= shrink;
            }
            x[i] -= lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// AdamW over a named parameter table; weight decay touches rank-2 tensors only.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamConfig,
    state: IndexMap<String, Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamW { config, state: IndexMap::new() }
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &IndexMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| Error::invalid(format!("no gradient for {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape("adamw", format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), p.shape())));
            }
            let decay = p.shape().len() == 2;
            let st = self.state.entry(name.to_string()).or_insert_with(|| Moments::new(p.numel()));
            st.step(p.data_mut(), g.data(), lr, &self.config, decay, false);
        }
        Ok(())
    }
}

/// Linear warm-up to `base_lr`, then cosine decay to zero at `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    /// Warm-up of `min(100, total / 10)` steps.
    pub fn cosine(base_lr: f64, total: usize) -> Self {
        Schedule { base_lr, warmup: (total / 10).min(100), total }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base_lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        let frac = ((step - self.warmup) as f64 / span).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}
