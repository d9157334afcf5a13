use super::{Decl, Fwd, Linear};
use crate::error::Result;
use crate::numcore::{Tensor, Var};
use crate::scalar::Scalar;

/// Sinusoidal features `[cos(t w_k), sin(t w_k)]` with `w_k = max_period^(-k/half)`.
pub fn sinusoidal<T: Scalar>(ts: &[f64], dim: usize, max_period: f64) -> Tensor<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); ts.len() * dim];
    for (b, &t) in ts.iter().enumerate() {
        for k in 0..half {
            let freq = (-(max_period.ln()) * k as f64 / half as f64).exp();
            let a = t * freq;
            out[b * dim + k] = T::of(a.cos());
            out[b * dim + half + k] = T::of(a.sin());
        }
    }
    Tensor::new(vec![ts.len(), dim], out).expect("shape matches data")
}

/// Scalar time to a `time_dim` embedding: sinusoid, linear, SiLU, linear.
#[derive(Clone, Copy, Debug)]
pub struct TimeEmbedder {
    pub freq_dim: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TimeEmbedder {
    pub fn declare(decl: &mut Decl<'_>, prefix: &str, freq_dim: usize, time_dim: usize) -> Self {
        Self {
            freq_dim,
            fc1: decl.linear(&format!("{prefix}.fc1"), None, freq_dim, time_dim),
            fc2: decl.linear(&format!("{prefix}.fc2"), None, time_dim, time_dim),
        }
    }

    /// Embeds times in `[0, 1]`, scaled by 1000 so the sinusoids spread out.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, ts: &[f64]) -> Result<Var> {
        let scaled: Vec<f64> = ts.iter().map(|t| t * 1000.0).collect();
        let s = f.tape.constant(sinusoidal(&scaled, self.freq_dim, 10_000.0))?;
        let h = f.linear(s, &self.fc1)?;
        let h = f.tape.silu(h)?;
        f.linear(h, &self.fc2)
    }
}
