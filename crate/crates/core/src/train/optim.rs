use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::numcore::{ParamGrads, ParamStore, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup to the peak, then linear decay to zero at the last step.
    LinearWarmupDecay,
    /// Optional linear warmup, then `0.5 (1 + cos(pi * frac))` to zero.
    Cosine,
    Constant,
}

/// Learning rate after `step` completed updates out of `total`.
pub fn lr_at(step: usize, total: usize, peak: f64, warmup: usize, schedule: Schedule) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let frac = ((step - warmup) as f64 / span).min(1.0);
    match schedule {
        Schedule::LinearWarmupDecay => peak * (1.0 - frac),
        Schedule::Cosine => 0.5 * peak * (1.0 + (PI * frac).cos()),
        Schedule::Constant => peak,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moments per storage slot, plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(store: &ParamStore<T>) -> Self {
        let m: Vec<_> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self { v: m.clone(), m, step: 0 }
    }
}

/// Outcome of one optimizer call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub skipped: bool,
}

impl AdamW {
    /// One decoupled-decay Adam update. Every storage slot is visited once,
    /// so aliased parameters move exactly once with their summed gradient.
    /// Non-finite gradients leave parameters and moments untouched.
    pub fn step<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        grads: &mut ParamGrads<T>,
        moments: &mut Moments<T>,
        lr: f64,
        clip_norm: Option<f64>,
    ) -> StepInfo {
        let grad_norm = grads.global_norm();
        if !grad_norm.is_finite() || !grads.all_finite() {
            return StepInfo { grad_norm, skipped: true };
        }
        if let Some(c) = clip_norm {
            if grad_norm > c {
                grads.scale(T::of(c / grad_norm));
            }
        }
        moments.step += 1;
        let t = moments.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let decay = if store.layout().spec(id).decay { T::of(lr * self.weight_decay) } else { T::zero() };
            let g = grads.get(id);
            let (m, v) = (&mut moments.m[id.index()], &mut moments.v[id.index()]);
            let p = store.get_mut(id);
            for i in 0..p.numel() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                let mi = b1 * m.data()[i] + (one - b1) * gi;
                let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let w = p.data()[i];
                p.data_mut()[i] = w - decay * w - step_size * mi / ((vi * inv_bc2).sqrt() + eps);
            }
        }
        StepInfo { grad_norm, skipped: false }
    }
}
