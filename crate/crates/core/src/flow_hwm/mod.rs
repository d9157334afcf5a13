//! Flow matching on continuous latents: patch tokens, the straight
//! interpolant and its velocity, guidance and Euler sampling.

mod model;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use model::{FlowBatch, FlowConfig, FlowNet, FlowObjective, FlowRunner};

use crate::error::{HwmError, Result};
use crate::latentworld::{ActionSequence, LatentClip};
use crate::numcore::Tensor;
use crate::rng;
use crate::scalar::Scalar;

pub const DEFAULT_SIGMA_MIN: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub scale: f64,
    /// Probability of training an item with all conditioning replaced by null tokens.
    pub cond_drop_prob: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { scale: 3.0, cond_drop_prob: 0.1 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return Err(HwmError::Config(format!("guidance scale {} must be finite and non-negative", self.scale)));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(HwmError::Config(format!("cond_drop_prob {} must be in [0, 1]", self.cond_drop_prob)));
        }
        Ok(())
    }
}

/// One training point on the straight path from noise to data.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
    pub xt: Vec<f64>,
    pub vt: Vec<f64>,
    pub sigma_min: f64,
}

impl FlowSample {
    pub fn new(x0: Vec<f64>, x1: Vec<f64>, t: f64, sigma_min: f64) -> Result<Self> {
        let (xt, vt) = interpolate(&x0, &x1, t, sigma_min)?;
        Ok(Self { x0, x1, t, xt, vt, sigma_min })
    }
}

/// `xt = t x1 + (1 - (1 - sigma_min) t) x0` and `vt = x1 - (1 - sigma_min) x0`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64, sigma_min: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if x0.len() != x1.len() {
        return Err(HwmError::dim("interpolate", format!("{} noise vs {} data values", x0.len(), x1.len())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(HwmError::Config(format!("interpolation time {t} outside [0, 1]")));
    }
    let a = 1.0 - (1.0 - sigma_min) * t;
    let xt = x0.iter().zip(x1).map(|(&n, &d)| t * d + a * n).collect();
    let vt = x0.iter().zip(x1).map(|(&n, &d)| d - (1.0 - sigma_min) * n).collect();
    Ok((xt, vt))
}

/// `u_uncond + scale (u_cond - u_uncond)`; scale 1 returns `u_cond` untouched.
pub fn cfg_combine(u_cond: &[f64], u_uncond: &[f64], scale: f64) -> Result<Vec<f64>> {
    if u_cond.len() != u_uncond.len() {
        return Err(HwmError::dim("cfg_combine", format!("{} vs {} values", u_cond.len(), u_uncond.len())));
    }
    if scale == 1.0 {
        return Ok(u_cond.to_vec());
    }
    Ok(u_cond.iter().zip(u_uncond).map(|(&c, &u)| u + scale * (c - u)).collect())
}

/// Splits `[T, C, G, G]` latents into `p_t x p_lw x p_lw` patches.
///
/// Tokens run over (frame group, patch row, patch column); each patch
/// vector is ordered (frame in group, channel, row in patch, column in patch).
/// `proj` is an optional `[patch_dim, h]` projection applied to every token.
pub fn patchify<T: Scalar>(clip: &LatentClip, p_lw: usize, p_t: usize, proj: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let vals: Vec<T> = clip.values.iter().map(|&v| T::of(v as f64)).collect();
    let tokens = patchify_values(&vals, clip.frames, clip.channels, clip.grid, p_lw, p_t)?;
    match proj {
        None => Ok(tokens),
        Some(w) => project(&tokens, w),
    }
}

/// Inverse of [`patchify`] for un-projected tokens `[n, patch_dim]`.
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, frames: usize, channels: usize, grid: usize, p_lw: usize, p_t: usize) -> Result<LatentClip> {
    let vals = unpatchify_values(tokens.data(), frames, channels, grid, p_lw, p_t)?;
    LatentClip::new(frames, channels, grid, vals.iter().map(|v| v.to_f64().unwrap_or(f64::NAN) as f32).collect())
}

fn check_patch(frames: usize, grid: usize, p_lw: usize, p_t: usize) -> Result<()> {
    if p_lw == 0 || p_t == 0 || grid % p_lw != 0 || frames % p_t != 0 {
        return Err(HwmError::dim(
            "patchify",
            format!("grid {grid} / frames {frames} not divisible by patch {p_lw} x {p_t}"),
        ));
    }
    Ok(())
}

pub fn patch_dim(channels: usize, p_lw: usize, p_t: usize) -> usize {
    channels * p_lw * p_lw * p_t
}

/// Patchify on a flat `[T, C, G, G]` buffer.
pub fn patchify_values<T: Scalar>(vals: &[T], frames: usize, channels: usize, grid: usize, p_lw: usize, p_t: usize) -> Result<Tensor<T>> {
    check_patch(frames, grid, p_lw, p_t)?;
    if vals.len() != frames * channels * grid * grid {
        return Err(HwmError::dim("patchify", "buffer does not match the clip shape"));
    }
    let (gp, tg, pd) = (grid / p_lw, frames / p_t, patch_dim(channels, p_lw, p_t));
    let mut out = Vec::with_capacity(vals.len());
    for tgi in 0..tg {
        for py in 0..gp {
            for px in 0..gp {
                for dt in 0..p_t {
                    for c in 0..channels {
                        for dy in 0..p_lw {
                            let row = ((tgi * p_t + dt) * channels + c) * grid * grid + (py * p_lw + dy) * grid + px * p_lw;
                            out.extend_from_slice(&vals[row..row + p_lw]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![tg * gp * gp, pd], out)
}

pub fn unpatchify_values<T: Scalar>(tokens: &[T], frames: usize, channels: usize, grid: usize, p_lw: usize, p_t: usize) -> Result<Vec<T>> {
    check_patch(frames, grid, p_lw, p_t)?;
    if tokens.len() != frames * channels * grid * grid {
        return Err(HwmError::dim("unpatchify", "token buffer does not match the clip shape"));
    }
    let (gp, tg) = (grid / p_lw, frames / p_t);
    let mut out = vec![T::zero(); tokens.len()];
    let mut src = 0;
    for tgi in 0..tg {
        for py in 0..gp {
            for px in 0..gp {
                for dt in 0..p_t {
                    for c in 0..channels {
                        for dy in 0..p_lw {
                            let row = ((tgi * p_t + dt) * channels + c) * grid * grid + (py * p_lw + dy) * grid + px * p_lw;
                            out[row..row + p_lw].copy_from_slice(&tokens[src..src + p_lw]);
                            src += p_lw;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn project<T: Scalar>(tokens: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, pd) = (tokens.shape()[0], tokens.shape()[1]);
    if w.rank() != 2 || w.shape()[0] != pd {
        return Err(HwmError::dim("patchify", format!("projection {:?} for patch dim {pd}", w.shape())));
    }
    let h = w.shape()[1];
    let mut out = vec![T::zero(); n * h];
    for i in 0..n {
        for k in 0..pd {
            let a = tokens.data()[i * pd + k];
            for j in 0..h {
                out[i * h + j] += a * w.data()[k * h + j];
            }
        }
    }
    Tensor::new(vec![n, h], out)
}

/// Conditioning for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowCondition {
    pub past: LatentClip,
    pub past_actions: ActionSequence,
    pub future_actions: ActionSequence,
}

/// Anything that predicts a velocity for future latents in `[T, C, G, G]`
/// layout. `uncond` swaps every item's conditioning for the null tokens.
pub trait VelocityModel {
    fn velocity(&self, x: &[Vec<f64>], conds: &[&FlowCondition], t: f64, uncond: bool) -> Result<Vec<Vec<f64>>>;
}

/// Standard normal starting points, one stream per item.
pub fn draw_noise(seed: u64, items: usize, numel: usize) -> Vec<Vec<f64>> {
    (0..items)
        .map(|i| {
            let mut r = rng::stream(seed, "sample-noise", i as u64);
            (0..numel).map(|_| StandardNormal.sample(&mut r)).collect()
        })
        .collect()
}

/// Forward Euler from `t = 0` to `t = 1` with guidance.
pub fn euler_integrate(
    model: &dyn VelocityModel,
    mut x: Vec<Vec<f64>>,
    conds: &[&FlowCondition],
    steps: usize,
    guidance: &GuidanceConfig,
) -> Result<Vec<Vec<f64>>> {
    if steps == 0 {
        return Err(HwmError::Config("Euler sampling needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let uc = model.velocity(&x, conds, t, false)?;
        let uu = if guidance.scale == 1.0 { None } else { Some(model.velocity(&x, conds, t, true)?) };
        for (i, xi) in x.iter_mut().enumerate() {
            let u = match &uu {
                Some(uu) => cfg_combine(&uc[i], &uu[i], guidance.scale)?,
                None => uc[i].clone(),
            };
            if u.len() != xi.len() {
                return Err(HwmError::dim("euler", "velocity does not match the state"));
            }
            for (a, &b) in xi.iter_mut().zip(&u) {
                *a += dt * b;
            }
            if xi.iter().any(|v| !v.is_finite()) {
                return Err(HwmError::Integration { step: k });
            }
        }
    }
    Ok(x)
}

/// Samples future latents of shape `frames x channels x grid x grid` for each condition.
pub fn euler_sample(
    model: &dyn VelocityModel,
    conds: &[&FlowCondition],
    shape: (usize, usize, usize),
    steps: usize,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<Vec<LatentClip>> {
    let (frames, channels, grid) = shape;
    let x0 = draw_noise(seed, conds.len(), frames * channels * grid * grid);
    euler_integrate(model, x0, conds, steps, guidance)?
        .into_iter()
        .map(|x| LatentClip::new(frames, channels, grid, x.into_iter().map(|v| v as f32).collect()))
        .collect()
}

#[cfg(test)]
mod tests;
