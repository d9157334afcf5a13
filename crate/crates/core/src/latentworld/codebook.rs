use rand_distr::{Distribution, StandardNormal};

use super::{LatentClip, TokenGrid};
use crate::error::{HwmError, Result};
use crate::rng;

/// Fixed token-to-latent table, `s x C`. Rows are seeded Gaussian vectors,
/// redrawn until every pair is at least `MIN_DISTANCE` apart.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub vocab: usize,
    pub channels: usize,
    pub rows: Vec<f32>,
}

pub const MIN_DISTANCE: f32 = 1.0;

impl Codebook {
    pub fn new(vocab: usize, channels: usize, seed: u64) -> Result<Self> {
        if vocab == 0 || channels == 0 {
            return Err(HwmError::Config("codebook needs a positive vocabulary and channel count".into()));
        }
        for attempt in 0..64 {
            let mut r = rng::stream(seed, "codebook", attempt);
            let rows: Vec<f32> = (0..vocab * channels)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    z as f32
                })
                .collect();
            let cb = Self { vocab, channels, rows };
            if cb.min_distance() >= MIN_DISTANCE {
                return Ok(cb);
            }
        }
        Err(HwmError::Config(format!(
            "could not draw {vocab} codebook rows {MIN_DISTANCE} apart in {channels} channels"
        )))
    }

    pub fn row(&self, token: usize) -> &[f32] {
        &self.rows[token * self.channels..(token + 1) * self.channels]
    }

    pub fn min_distance(&self) -> f32 {
        let mut best = f32::INFINITY;
        for i in 0..self.vocab {
            for j in i + 1..self.vocab {
                best = best.min(dist2(self.row(i), self.row(j)).sqrt());
            }
        }
        best
    }

    /// Index of the row closest to `v`.
    pub fn nearest(&self, v: &[f32]) -> u32 {
        let mut best = (f32::INFINITY, 0);
        for t in 0..self.vocab {
            let d = dist2(self.row(t), v);
            if d < best.0 {
                best = (d, t);
            }
        }
        best.1 as u32
    }
}

fn dist2(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Codebook latents for every cell, plus Gaussian jitter of scale `jitter`.
pub fn embed_tokens(grid: &TokenGrid, codebook: &Codebook, jitter: f64, r: &mut rng::Rng) -> Result<LatentClip> {
    if grid.vocab != codebook.vocab {
        return Err(HwmError::dim("embed_tokens", format!("grid vocabulary {} vs codebook rows {}", grid.vocab, codebook.vocab)));
    }
    let (c, cells) = (codebook.channels, grid.cells());
    let mut values = vec![0.0f32; grid.frames * c * cells];
    for k in 0..grid.frames {
        for (i, &t) in grid.frame(k).iter().enumerate() {
            if t as usize >= codebook.vocab {
                return Err(HwmError::TokenOutOfRange { id: t, vocab: codebook.vocab });
            }
            for (ch, &v) in codebook.row(t as usize).iter().enumerate() {
                values[(k * c + ch) * cells + i] = v;
            }
        }
    }
    if jitter > 0.0 {
        for v in &mut values {
            let z: f64 = StandardNormal.sample(r);
            *v += (z * jitter) as f32;
        }
    }
    LatentClip::new(grid.frames, c, grid.grid, values)
}

/// Nearest-row decoding of latents back to tokens.
pub fn quantize(clip: &LatentClip, codebook: &Codebook) -> Result<TokenGrid> {
    if clip.channels != codebook.channels {
        return Err(HwmError::dim("quantize", format!("{} channels vs codebook width {}", clip.channels, codebook.channels)));
    }
    let cells = clip.grid * clip.grid;
    let c = clip.channels;
    let mut tokens = Vec::with_capacity(clip.frames * cells);
    let mut v = vec![0.0f32; c];
    for k in 0..clip.frames {
        for i in 0..cells {
            for (ch, slot) in v.iter_mut().enumerate() {
                *slot = clip.values[(k * c + ch) * cells + i];
            }
            tokens.push(codebook.nearest(&v));
        }
    }
    TokenGrid::new(clip.frames, clip.grid, codebook.vocab, tokens)
}
