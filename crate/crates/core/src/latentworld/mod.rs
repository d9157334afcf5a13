//! Deterministic synthetic token world.
//!
//! A fixed per-episode background of tokens below `s/2` and one 2x2 sprite
//! whose motion follows the quantized latent actions. Future frames are an
//! exact function of the last past frame, the episode seed and the actions.

mod codebook;
mod io;

pub use codebook::{embed_tokens, quantize, Codebook};
pub use io::{decode_episode, encode_episode, read_episode, write_episode, write_token_png, EPISODE_MAGIC};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HwmError, Result};
use crate::rng;

/// Number of raw frames folded into one latent frame (after the leading frame).
pub const TEMPORAL_GROUP: usize = 8;
/// Quantization threshold for the movement components of an action.
pub const MOVE_THRESHOLD: f32 = 0.4;
const INTENT: f32 = 0.8;
const ACTION_NOISE: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Grid side length.
    #[serde(rename = "G")]
    pub grid: usize,
    /// Vocabulary size (MASK is `s`, outside the vocabulary).
    #[serde(rename = "s")]
    pub vocab: usize,
    /// Action dimension.
    #[serde(rename = "z")]
    pub action_dim: usize,
    /// Raw past frames.
    #[serde(rename = "p")]
    pub past_frames: usize,
    /// Raw future frames.
    #[serde(rename = "f")]
    pub future_frames: usize,
    /// Latent channels produced by the codebook embedding.
    #[serde(rename = "C")]
    pub channels: usize,
    pub jitter: f64,
    pub codebook_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            vocab: 64,
            action_dim: 4,
            past_frames: 9,
            future_frames: 8,
            channels: 16,
            jitter: 0.01,
            codebook_seed: 0x5eed,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 4 {
            return Err(HwmError::Config(format!("world.G must be at least 4, got {}", self.grid)));
        }
        if self.vocab < 8 || self.vocab % 2 != 0 {
            return Err(HwmError::Config(format!("world.s must be even and at least 8, got {}", self.vocab)));
        }
        if self.action_dim < 2 {
            return Err(HwmError::Config(format!("world.z must be at least 2, got {}", self.action_dim)));
        }
        if self.past_frames == 0 || (self.past_frames - 1) % TEMPORAL_GROUP != 0 {
            return Err(HwmError::Config(format!(
                "world.p must be 1 + a multiple of {TEMPORAL_GROUP}, got {}",
                self.past_frames
            )));
        }
        if self.future_frames == 0 || self.future_frames % TEMPORAL_GROUP != 0 {
            return Err(HwmError::Config(format!(
                "world.f must be a positive multiple of {TEMPORAL_GROUP}, got {}",
                self.future_frames
            )));
        }
        if self.channels == 0 {
            return Err(HwmError::Config("world.C must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(HwmError::Config(format!("world.jitter must be in [0, 1), got {}", self.jitter)));
        }
        Ok(())
    }

    pub fn past_latent_frames(&self) -> usize {
        1 + (self.past_frames - 1) / TEMPORAL_GROUP
    }

    pub fn future_latent_frames(&self) -> usize {
        self.future_frames / TEMPORAL_GROUP
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn mask_id(&self) -> u32 {
        self.vocab as u32
    }

    pub fn sprite_base(&self) -> u32 {
        (self.vocab / 2) as u32
    }

    /// Raw-frame range `[start, end)` of latent frame `k` within a clip that
    /// starts with a single leading frame.
    pub fn past_group(&self, k: usize) -> std::ops::Range<usize> {
        if k == 0 {
            0..1
        } else {
            1 + (k - 1) * TEMPORAL_GROUP..1 + k * TEMPORAL_GROUP
        }
    }

    /// Raw-frame range of future latent frame `k` within the future clip.
    pub fn future_group(&self, k: usize) -> std::ops::Range<usize> {
        k * TEMPORAL_GROUP..(k + 1) * TEMPORAL_GROUP
    }
}

/// Integer token ids on a `frames x G x G` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub frames: usize,
    pub grid: usize,
    pub vocab: usize,
    pub tokens: Vec<u32>,
}

impl TokenGrid {
    pub fn new(frames: usize, grid: usize, vocab: usize, tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() != frames * grid * grid {
            return Err(HwmError::dim(
                "token grid",
                format!("{frames}x{grid}x{grid} needs {} ids, got {}", frames * grid * grid, tokens.len()),
            ));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(HwmError::TokenOutOfRange { id: bad, vocab });
        }
        Ok(Self { frames, grid, vocab, tokens })
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn frame(&self, k: usize) -> &[u32] {
        let c = self.cells();
        &self.tokens[k * c..(k + 1) * c]
    }

    pub fn frame_mut(&mut self, k: usize) -> &mut [u32] {
        let c = self.cells();
        &mut self.tokens[k * c..(k + 1) * c]
    }

    pub fn at(&self, k: usize, y: usize, x: usize) -> u32 {
        self.tokens[(k * self.grid + y) * self.grid + x]
    }

    /// Frames `[start, start + len)` as a new grid.
    pub fn frames_range(&self, start: usize, len: usize) -> TokenGrid {
        let c = self.cells();
        TokenGrid {
            frames: len,
            grid: self.grid,
            vocab: self.vocab,
            tokens: self.tokens[start * c..(start + len) * c].to_vec(),
        }
    }

    pub fn concat(&self, other: &TokenGrid) -> TokenGrid {
        let mut tokens = self.tokens.clone();
        tokens.extend_from_slice(&other.tokens);
        TokenGrid { frames: self.frames + other.frames, grid: self.grid, vocab: self.vocab, tokens }
    }
}

/// Continuous latents, `frames x C x G x G`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentClip {
    pub frames: usize,
    pub channels: usize,
    pub grid: usize,
    pub values: Vec<f32>,
}

impl LatentClip {
    pub fn new(frames: usize, channels: usize, grid: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != frames * channels * grid * grid {
            return Err(HwmError::dim("latent clip", format!("{} values for {frames}x{channels}x{grid}x{grid}", values.len())));
        }
        Ok(Self { frames, channels, grid, values })
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Per-frame action vectors, `frames x z`, components in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSequence {
    pub frames: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl ActionSequence {
    pub fn new(frames: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != frames * dim {
            return Err(HwmError::dim("actions", format!("{} values for {frames}x{dim}", values.len())));
        }
        Ok(Self { frames, dim, values })
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self { frames, dim, values: vec![0.0; frames * dim] }
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    /// One averaged vector per raw-frame range.
    pub fn group_mean(&self, groups: impl Iterator<Item = std::ops::Range<usize>>) -> ActionSequence {
        let mut values = Vec::new();
        let mut frames = 0;
        for g in groups {
            let n = g.len() as f32;
            let mut acc = vec![0.0f32; self.dim];
            for r in g {
                for (a, &v) in acc.iter_mut().zip(self.row(r)) {
                    *a += v;
                }
            }
            values.extend(acc.into_iter().map(|a| a / n));
            frames += 1;
        }
        ActionSequence { frames, dim: self.dim, values }
    }
}

/// How raw actions are drawn for an episode.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionPolicy {
    /// Per latent group a movement intent in {-0.8, 0, 0.8} on components 0/1
    /// plus Gaussian noise; other components uniform in [-1, 1].
    Random,
    Zero,
    /// The same raw action on every frame.
    Constant(Vec<f32>),
}

/// One aligned episode: past/future tokens, latents and raw actions.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub past_tokens: TokenGrid,
    pub future_tokens: TokenGrid,
    pub past_latents: Option<LatentClip>,
    pub future_latents: Option<LatentClip>,
    pub past_actions: ActionSequence,
    pub future_actions: ActionSequence,
}

impl Episode {
    /// Past actions averaged onto latent frames.
    pub fn past_latent_actions(&self, cfg: &WorldConfig) -> ActionSequence {
        self.past_actions.group_mean((0..cfg.past_latent_frames()).map(|k| cfg.past_group(k)))
    }

    pub fn future_latent_actions(&self, cfg: &WorldConfig) -> ActionSequence {
        self.future_actions.group_mean((0..cfg.future_latent_frames()).map(|k| cfg.future_group(k)))
    }
}

/// Maps an action component to a unit step.
pub fn quantize_move(a: f32) -> i32 {
    if a > MOVE_THRESHOLD {
        1
    } else if a < -MOVE_THRESHOLD {
        -1
    } else {
        0
    }
}

/// Background token at `(x, y)` for a world seed.
pub fn background_token(x: usize, y: usize, seed: u64, vocab: usize) -> u32 {
    let h = rng::derive_seed(seed, "background", ((y as u64) << 32) | x as u64);
    (h % (vocab as u64 / 2)) as u32
}

fn render(cfg: &WorldConfig, seed: u64, pos: (usize, usize), sprite: u32, out: &mut [u32]) {
    let g = cfg.grid;
    for y in 0..g {
        for x in 0..g {
            out[y * g + x] = background_token(x, y, seed, cfg.vocab);
        }
    }
    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        out[((pos.1 + dy) % g) * g + (pos.0 + dx) % g] = sprite;
    }
}

fn step(cfg: &WorldConfig, pos: (usize, usize), action: &[f32]) -> ((usize, usize), u32) {
    let g = cfg.grid as i32;
    let (mx, my) = (quantize_move(action[0]), quantize_move(action[1]));
    let x = (pos.0 as i32 + mx).rem_euclid(g) as usize;
    let y = (pos.1 as i32 + my).rem_euclid(g) as usize;
    ((x, y), cfg.sprite_base() + (mx.abs() + my.abs()) as u32)
}

fn raw_actions(cfg: &WorldConfig, policy: &ActionPolicy, frames: usize, groups: &[std::ops::Range<usize>], r: &mut rng::Rng) -> Result<ActionSequence> {
    let z = cfg.action_dim;
    let mut values = vec![0.0f32; frames * z];
    match policy {
        ActionPolicy::Zero => {}
        ActionPolicy::Constant(a) => {
            if a.len() != z || a.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(HwmError::Config(format!("constant action must have {z} components in [-1, 1]")));
            }
            for f in 0..frames {
                values[f * z..(f + 1) * z].copy_from_slice(a);
            }
        }
        ActionPolicy::Random => {
            let noise = Normal::new(0.0, ACTION_NOISE).expect("valid normal");
            for g in groups {
                let intent = [INTENT * r.random_range(-1i32..=1) as f32, INTENT * r.random_range(-1i32..=1) as f32];
                for f in g.clone() {
                    for c in 0..z {
                        values[f * z + c] = if c < 2 {
                            (intent[c] + noise.sample(r) as f32).clamp(-1.0, 1.0)
                        } else {
                            r.random_range(-1.0f32..=1.0)
                        };
                    }
                }
            }
        }
    }
    ActionSequence::new(frames, z, values)
}

/// Generates the episode for `seed` with random actions.
pub fn gen_episode(seed: u64, cfg: &WorldConfig) -> Result<Episode> {
    gen_episode_with(seed, cfg, &ActionPolicy::Random)
}

pub fn gen_episode_with(seed: u64, cfg: &WorldConfig, policy: &ActionPolicy) -> Result<Episode> {
    cfg.validate()?;
    let (tp, tf) = (cfg.past_latent_frames(), cfg.future_latent_frames());
    let mut r = rng::stream(seed, "episode", 0);
    let start = (r.random_range(0..cfg.grid), r.random_range(0..cfg.grid));
    let past_groups: Vec<_> = (0..tp).map(|k| cfg.past_group(k)).collect();
    let future_groups: Vec<_> = (0..tf).map(|k| cfg.future_group(k)).collect();
    let past_actions = raw_actions(cfg, policy, cfg.past_frames, &past_groups, &mut r)?;
    let future_actions = raw_actions(cfg, policy, cfg.future_frames, &future_groups, &mut r)?;

    let past_lat = past_actions.group_mean(past_groups.into_iter());
    let c = cfg.cells();
    let mut past = vec![0u32; tp * c];
    let mut pos = start;
    for k in 0..tp {
        let a = past_lat.row(k);
        // The leading frame shows the sprite where it starts.
        let (next, sprite) = step(cfg, pos, a);
        if k > 0 {
            pos = next;
        }
        render(cfg, seed, pos, sprite, &mut past[k * c..(k + 1) * c]);
    }
    let past_tokens = TokenGrid::new(tp, cfg.grid, cfg.vocab, past)?;
    let mut episode = Episode {
        seed,
        future_tokens: TokenGrid::new(0, cfg.grid, cfg.vocab, vec![])?,
        past_tokens,
        past_latents: None,
        future_latents: None,
        past_actions,
        future_actions,
    };
    episode.future_tokens = oracle_future(&episode.past_tokens, &episode.future_latent_actions(cfg), cfg, seed)?;
    Ok(episode)
}

/// Adds codebook latents (with the configured jitter) to an episode.
pub fn attach_latents(episode: &mut Episode, codebook: &Codebook, jitter: f64) -> Result<()> {
    let mut r = rng::stream(episode.seed, "jitter", 0);
    episode.past_latents = Some(embed_tokens(&episode.past_tokens, codebook, jitter, &mut r)?);
    episode.future_latents = Some(embed_tokens(&episode.future_tokens, codebook, jitter, &mut r)?);
    Ok(())
}

/// Top-left corner of the 2x2 sprite in one frame.
pub fn locate_sprite(frame: &[u32], grid: usize, vocab: usize) -> Option<(usize, usize)> {
    let base = (vocab / 2) as u32;
    let hit = |x: usize, y: usize| frame[(y % grid) * grid + x % grid] >= base;
    (0..grid)
        .flat_map(|y| (0..grid).map(move |x| (x, y)))
        .find(|&(x, y)| hit(x, y) && hit(x + 1, y) && hit(x, y + 1) && hit(x + 1, y + 1))
}

/// Exact future tokens given the past, the future latent actions and the
/// episode seed (which fixes the background).
pub fn oracle_future(past: &TokenGrid, future_actions: &ActionSequence, cfg: &WorldConfig, seed: u64) -> Result<TokenGrid> {
    if past.frames == 0 || past.grid != cfg.grid || past.vocab != cfg.vocab {
        return Err(HwmError::Config("past grid does not belong to this world".into()));
    }
    let mut pos = locate_sprite(past.frame(past.frames - 1), cfg.grid, cfg.vocab)
        .ok_or_else(|| HwmError::Config("no sprite in the last past frame".into()))?;
    let c = cfg.cells();
    let mut out = vec![0u32; future_actions.frames * c];
    for k in 0..future_actions.frames {
        let (p, sprite) = step(cfg, pos, future_actions.row(k));
        pos = p;
        render(cfg, seed, pos, sprite, &mut out[k * c..(k + 1) * c]);
    }
    TokenGrid::new(future_actions.frames, cfg.grid, cfg.vocab, out)
}

#[cfg(test)]
mod tests;
