//! AdamW, the warm-up + cosine schedule, layer-wise decay and EMA.

use crate::error::{Result, StarError};
use crate::params::{LayerGroup, ParamStore};
use crate::tensor::{Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimHyper {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self {
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

/// Linear warm-up from 0 to `base_lr`, then half-cosine down to 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

pub fn lr_at(step: u64, schedule: &Schedule) -> f64 {
    schedule.lr_at(step)
}

/// Per-parameter learning-rate multipliers: block `b` of `depth` gets
/// `decay^(depth - b)`, embeddings `decay^depth`, the head 1.
pub fn layer_scales<T: Real>(store: &ParamStore<T>, depth: usize, decay: f64) -> Vec<f64> {
    store
        .params()
        .iter()
        .map(|p| match p.group {
            LayerGroup::Embedding => decay.powi(depth as i32),
            LayerGroup::Block(b) => decay.powi(depth.saturating_sub(b) as i32),
            LayerGroup::Head => 1.0,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub hyper: OptimHyper,
    pub step: u64,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, hyper: OptimHyper) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Self {
            hyper,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. `scales[i]` multiplies the learning rate of parameter
    /// `i`; missing gradients count as zero. Non-finite gradients abort the
    /// step before anything is modified.
    pub fn update(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Matrix<T>>],
        lr: f64,
        scales: Option<&[f64]>,
    ) -> Result<()> {
        if let Some((i, _)) = grads
            .iter()
            .enumerate()
            .find(|(_, g)| g.as_ref().is_some_and(|g| !g.is_finite()))
        {
            return Err(StarError::NonFinite {
                step: self.step,
                what: format!("gradient of {}", store.params()[i].name),
            });
        }
        self.step += 1;
        let h = self.hyper;
        let t = self.step as i32;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        let (b1, b2) = (T::lit(h.beta1), T::lit(h.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - h.beta1), T::lit(1.0 - h.beta2));
        let eps = T::lit(h.eps);
        let bc2_sqrt = T::lit(bc2.sqrt());
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let lr_i = lr * scales.map_or(1.0, |s| s[i]);
            if p.decay && h.weight_decay != 0.0 {
                p.value.scale_assign(T::lit(1.0 - lr_i * h.weight_decay));
            }
            let step_size = T::lit(lr_i / bc1);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads.get(i).and_then(|g| g.as_ref());
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(T::zero(), |g| g.data()[k]);
                m[k] = b1 * m[k] + one_b1 * gk;
                v[k] = b2 * v[k] + one_b2 * gk * gk;
                let denom = v[k].sqrt() / bc2_sqrt + eps;
                *w -= step_size * m[k] / denom;
            }
        }
        Ok(())
    }
}

/// Exponential moving average of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema<T> {
    pub decay: f64,
    pub shadow: Vec<Matrix<T>>,
}

impl<T: Real> Ema<T> {
    pub fn new(store: &ParamStore<T>, decay: f64) -> Self {
        Self {
            decay,
            shadow: store.params().iter().map(|p| p.value.clone()).collect(),
        }
    }

    pub fn update(&mut self, store: &ParamStore<T>) {
        let d = T::lit(self.decay);
        let od = T::lit(1.0 - self.decay);
        for (s, p) in self.shadow.iter_mut().zip(store.params()) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.value.data()) {
                *a = d * *a + od * b;
            }
        }
    }

    /// A copy of `store` holding the averaged values.
    pub fn apply_to(&self, store: &ParamStore<T>) -> ParamStore<T> {
        let mut out = store.clone();
        for (p, s) in out.params_mut().iter_mut().zip(&self.shadow) {
            p.value = s.clone();
        }
        out
    }
}

/// L2 norm over every gradient entry.
pub fn grad_norm<T: Real>(grads: &[Option<Matrix<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}
