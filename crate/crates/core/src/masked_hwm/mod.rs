//! Masked video modelling: token corruption, per-frame masking, masked
//! cross-entropy and frame-by-frame parallel decoding.

mod model;

use std::f64::consts::FRAC_PI_2;

use rand::Rng as _;
use rand::distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

pub use model::{MaskedBatch, MaskedConfig, MaskedNet, MaskedObjective, MaskedRunner};

use crate::error::{HwmError, Result};
use crate::latentworld::{ActionSequence, TokenGrid};
use crate::numcore::{Tape, Var};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Fraction of a frame left masked after drawing `r`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSchedule {
    #[default]
    Cosine,
}

impl MaskSchedule {
    pub fn gamma(self, r: f64) -> f64 {
        match self {
            // cos(pi/2) is not exactly zero in floating point.
            MaskSchedule::Cosine if r >= 1.0 => 0.0,
            MaskSchedule::Cosine => (FRAC_PI_2 * r.max(0.0)).cos(),
        }
    }
}

/// Work buffer for one training example.
///
/// `work_tokens` spans past and future frames and uses an extended
/// vocabulary of `s + 1` ids where id `s` is MASK. `mask` covers future
/// positions only.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskState {
    pub work_tokens: TokenGrid,
    pub mask: Vec<bool>,
    pub corruption_rate: f64,
}

/// Replaces each token, with probability `rate ~ U(0, rho_max)`, by a
/// uniformly drawn different id in `[0, s)`.
pub fn corrupt_tokens(grid: &TokenGrid, rho_max: f64, r: &mut Rng) -> Result<(TokenGrid, f64)> {
    if !(0.0..1.0).contains(&rho_max) {
        return Err(HwmError::Config(format!("corruption rate bound {rho_max} must be in [0, 1)")));
    }
    if rho_max == 0.0 {
        return Ok((grid.clone(), 0.0));
    }
    let rate = r.random_range(0.0..rho_max);
    Ok((corrupt_at_rate(grid, rate, r), rate))
}

/// Corruption at a fixed rate.
pub fn corrupt_at_rate(grid: &TokenGrid, rate: f64, r: &mut Rng) -> TokenGrid {
    let s = grid.vocab as u32;
    let mut out = grid.clone();
    for t in &mut out.tokens {
        if r.random::<f64>() < rate {
            let u = r.random_range(0..s - 1);
            *t = if u >= *t { u + 1 } else { u };
        }
    }
    out
}

/// Per future frame draws `r ~ U(0, 1)` and masks each token independently
/// with probability `gamma(r)`.
pub fn mask_future(future: &TokenGrid, schedule: MaskSchedule, r: &mut Rng) -> MaskState {
    let rs: Vec<f64> = (0..future.frames).map(|_| r.random::<f64>()).collect();
    mask_future_at(future, schedule, &rs, r)
}

/// `mask_future` with the per-frame draws given.
pub fn mask_future_at(future: &TokenGrid, schedule: MaskSchedule, rs: &[f64], r: &mut Rng) -> MaskState {
    let mask_id = future.vocab as u32;
    let mut tokens = future.tokens.clone();
    let mut mask = vec![false; tokens.len()];
    let cells = future.cells();
    for (k, &rk) in rs.iter().enumerate().take(future.frames) {
        let g = schedule.gamma(rk);
        for i in k * cells..(k + 1) * cells {
            if r.random::<f64>() < g {
                mask[i] = true;
                tokens[i] = mask_id;
            }
        }
    }
    let work_tokens = TokenGrid { frames: future.frames, grid: future.grid, vocab: future.vocab + 1, tokens };
    MaskState { work_tokens, mask, corruption_rate: 0.0 }
}

/// Builds a training example: corrupt past and future together, then mask
/// the future. Targets are the clean future tokens.
pub fn prepare_example(past: &TokenGrid, future: &TokenGrid, rho_max: f64, schedule: MaskSchedule, r: &mut Rng) -> Result<MaskState> {
    let (corrupted, rate) = corrupt_tokens(&past.concat(future), rho_max, r)?;
    let cpast = corrupted.frames_range(0, past.frames);
    let cfuture = corrupted.frames_range(past.frames, future.frames);
    let masked = mask_future(&cfuture, schedule, r);
    let mut tokens = cpast.tokens;
    tokens.extend_from_slice(&masked.work_tokens.tokens);
    Ok(MaskState {
        work_tokens: TokenGrid { frames: past.frames + future.frames, grid: past.grid, vocab: past.vocab + 1, tokens },
        mask: masked.mask,
        corruption_rate: rate,
    })
}

/// Mean cross-entropy over masked positions. The flag is set when the mask
/// is empty and the loss was defined as zero.
pub fn masked_ce_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[u32], mask: &[bool]) -> Result<(Var, bool)> {
    let t: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let loss = tape.masked_cross_entropy(logits, &t, mask)?;
    Ok((loss, !mask.iter().any(|&m| m)))
}

/// One decoding query: work tokens over all frames plus latent actions.
#[derive(Clone, Debug)]
pub struct MaskedQuery<'a> {
    /// `T * G * G` ids, MASK allowed.
    pub work: &'a [u32],
    pub past_actions: &'a ActionSequence,
    pub future_actions: &'a ActionSequence,
}

/// Anything that scores future tokens given a partially masked clip.
pub trait MaskedPredictor {
    fn vocab(&self) -> usize;
    /// Logits `[tf * G * G, s]` per query, row-major.
    fn future_logits(&self, queries: &[MaskedQuery<'_>]) -> Result<Vec<Vec<f32>>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeOptions {
    /// Refinement steps per frame.
    pub steps: usize,
    pub temperature: f64,
    pub schedule: MaskSchedule,
    /// Re-mask the least confident tokens instead of a random subset.
    pub confidence_remask: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { steps: 2, temperature: 1.0, schedule: MaskSchedule::Cosine, confidence_remask: false }
    }
}

/// One decoding problem.
#[derive(Clone, Debug)]
pub struct DecodeJob<'a> {
    pub past: &'a TokenGrid,
    pub past_actions: &'a ActionSequence,
    pub future_actions: &'a ActionSequence,
}

/// Decodes the future of one clip, frame by frame, `opts.steps` parallel
/// passes per frame.
pub fn decode_iterative(
    model: &dyn MaskedPredictor,
    past: &TokenGrid,
    past_actions: &ActionSequence,
    future_actions: &ActionSequence,
    opts: &DecodeOptions,
    r: &mut Rng,
) -> Result<TokenGrid> {
    let job = DecodeJob { past, past_actions, future_actions };
    Ok(decode_batch(model, &[job], opts, r)?.remove(0))
}

/// Decodes several clips in lockstep so every pass is one batched query.
pub fn decode_batch(model: &dyn MaskedPredictor, jobs: &[DecodeJob<'_>], opts: &DecodeOptions, r: &mut Rng) -> Result<Vec<TokenGrid>> {
    if opts.steps == 0 {
        return Err(HwmError::Config("decoding needs at least one refinement step".into()));
    }
    let Some(first) = jobs.first() else { return Ok(vec![]) };
    let (grid, vocab, tp) = (first.past.grid, first.past.vocab, first.past.frames);
    let tf = first.future_actions.frames;
    let cells = grid * grid;
    if model.vocab() != vocab {
        return Err(HwmError::dim("decode", format!("model vocabulary {} vs grid vocabulary {vocab}", model.vocab())));
    }
    if jobs.iter().any(|j| j.past.frames != tp || j.past.grid != grid || j.future_actions.frames != tf) {
        return Err(HwmError::dim("decode", "jobs in one batch must share their shapes"));
    }
    let mask_id = vocab as u32;
    let mut work: Vec<Vec<u32>> = jobs
        .iter()
        .map(|j| {
            let mut w = j.past.tokens.clone();
            w.resize((tp + tf) * cells, mask_id);
            w
        })
        .collect();
    for frame in 0..tf {
        let base = (tp + frame) * cells;
        for step in 1..=opts.steps {
            let queries: Vec<MaskedQuery<'_>> = work
                .iter()
                .zip(jobs)
                .map(|(w, j)| MaskedQuery { work: w, past_actions: j.past_actions, future_actions: j.future_actions })
                .collect();
            let logits = model.future_logits(&queries)?;
            let last = step == opts.steps;
            for (b, w) in work.iter_mut().enumerate() {
                let rows = &logits[b][frame * cells * vocab..(frame + 1) * cells * vocab];
                if let Some(i) = rows.iter().position(|v| !v.is_finite()) {
                    return Err(HwmError::Decode(format!(
                        "non-finite logit at frame {frame}, step {step}, clip {b}, cell {}",
                        i / vocab
                    )));
                }
                let mut confidence = vec![f64::INFINITY; cells];
                for c in 0..cells {
                    if w[base + c] != mask_id {
                        continue;
                    }
                    let row = &rows[c * vocab..(c + 1) * vocab];
                    let (tok, p) = if last { argmax(row) } else { sample(row, opts.temperature, r)? };
                    w[base + c] = tok;
                    confidence[c] = p;
                }
                if !last {
                    let n = (opts.schedule.gamma(step as f64 / opts.steps as f64) * cells as f64).round() as usize;
                    let order = if opts.confidence_remask {
                        let mut idx: Vec<usize> = (0..cells).collect();
                        idx.sort_by(|&a, &b| confidence[a].total_cmp(&confidence[b]));
                        idx
                    } else {
                        rand::seq::index::sample(r, cells, cells).into_vec()
                    };
                    for &c in order.iter().take(n) {
                        w[base + c] = mask_id;
                    }
                }
            }
        }
    }
    work.into_iter()
        .map(|w| TokenGrid::new(tf, grid, vocab, w[tp * cells..].to_vec()))
        .collect()
}

fn argmax(row: &[f32]) -> (u32, f64) {
    let (i, _) = row.iter().enumerate().fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
    (i as u32, softmax_prob(row, i, 1.0))
}

fn softmax_prob(row: &[f32], i: usize, temperature: f64) -> f64 {
    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = row.iter().map(|&v| ((v as f64 - m) / temperature).exp()).sum();
    ((row[i] as f64 - m) / temperature).exp() / z
}

fn sample(row: &[f32], temperature: f64, r: &mut Rng) -> Result<(u32, f64)> {
    if temperature <= 0.0 {
        return Ok(argmax(row));
    }
    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let w: Vec<f64> = row.iter().map(|&v| ((v as f64 - m) / temperature).exp()).collect();
    let dist = WeightedIndex::new(&w).map_err(|e| HwmError::Decode(format!("bad sampling weights: {e}")))?;
    let i = dist.sample(r);
    let z: f64 = w.iter().sum();
    Ok((i as u32, w[i] / z))
}

#[cfg(test)]
mod tests;
