//! Episode files and debug images.
//!
//! Episode layout, all little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "HWM1"
//! 4       4     G            u32
//! 8       4     s            u32
//! 12      4     z            u32
//! 16      4     p (raw past frames)    u32
//! 20      4     f (raw future frames)  u32
//! 24      4     Tp (latent past)       u32
//! 28      4     Tf (latent future)     u32
//! 32      8     seed         u64
//! 40      4     flags        u32 (bit 0: latents present)
//! 44      4     C            u32 (0 without latents)
//! 48      ...   past tokens   Tp*G*G u32, frame-major then row-major
//!               future tokens Tf*G*G u32
//!               past actions  p*z f32
//!               future actions f*z f32
//!               [past latents  Tp*C*G*G f32, future latents Tf*C*G*G f32]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ActionSequence, Episode, LatentClip, TokenGrid};
use crate::error::{HwmError, Result};

pub const EPISODE_MAGIC: &[u8; 4] = b"HWM1";
const HEADER_LEN: usize = 48;

pub fn write_episode(path: &Path, ep: &Episode) -> Result<()> {
    let file = File::create(path).map_err(|e| HwmError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let bytes = encode_episode(ep)?;
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| HwmError::io(path, e))
}

pub fn encode_episode(ep: &Episode) -> Result<Vec<u8>> {
    let g = ep.past_tokens.grid;
    let latents = match (&ep.past_latents, &ep.future_latents) {
        (Some(p), Some(f)) => Some((p, f)),
        (None, None) => None,
        _ => return Err(HwmError::Format { context: "episode", detail: "latents must be present for both past and future".into() }),
    };
    let channels = latents.map_or(0, |(p, _)| p.channels);
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (ep.past_tokens.tokens.len() + ep.future_tokens.tokens.len()));
    out.extend_from_slice(EPISODE_MAGIC);
    for v in [
        g,
        ep.past_tokens.vocab,
        ep.past_actions.dim,
        ep.past_actions.frames,
        ep.future_actions.frames,
        ep.past_tokens.frames,
        ep.future_tokens.frames,
    ] {
        out.extend_from_slice(&u32(v)?.to_le_bytes());
    }
    out.extend_from_slice(&ep.seed.to_le_bytes());
    out.extend_from_slice(&u32::from(latents.is_some()).to_le_bytes());
    out.extend_from_slice(&u32(channels)?.to_le_bytes());
    for t in ep.past_tokens.tokens.iter().chain(&ep.future_tokens.tokens) {
        out.extend_from_slice(&t.to_le_bytes());
    }
    for v in ep.past_actions.values.iter().chain(&ep.future_actions.values) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some((p, f)) = latents {
        for v in p.values.iter().chain(&f.values) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| HwmError::Format { context: "episode", detail: format!("{v} does not fit in u32") })
}

pub fn read_episode(path: &Path) -> Result<Episode> {
    let file = File::open(path).map_err(|e| HwmError::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| HwmError::io(path, e))?;
    decode_episode(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| HwmError::Format {
            context: "episode",
            detail: format!("truncated at byte {} (need {n} more)", self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(too_big)?)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(too_big)?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

fn too_big() -> HwmError {
    HwmError::Format { context: "episode", detail: "payload size overflows".into() }
}

pub fn decode_episode(bytes: &[u8]) -> Result<Episode> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != EPISODE_MAGIC {
        return Err(HwmError::Format { context: "episode", detail: "bad magic, expected HWM1".into() });
    }
    let mut h = [0usize; 7];
    for v in &mut h {
        *v = c.u32()? as usize;
    }
    let [g, s, z, p, f, tp, tf] = h;
    let seed = c.u64()?;
    let flags = c.u32()?;
    let channels = c.u32()? as usize;
    let past_tokens = TokenGrid::new(tp, g, s, c.u32s(tp * g * g)?)?;
    let future_tokens = TokenGrid::new(tf, g, s, c.u32s(tf * g * g)?)?;
    let past_actions = ActionSequence::new(p, z, c.f32s(p * z)?)?;
    let future_actions = ActionSequence::new(f, z, c.f32s(f * z)?)?;
    let (past_latents, future_latents) = if flags & 1 == 1 {
        let cells = g * g * channels;
        (
            Some(LatentClip::new(tp, channels, g, c.f32s(tp * cells)?)?),
            Some(LatentClip::new(tf, channels, g, c.f32s(tf * cells)?)?),
        )
    } else {
        (None, None)
    };
    if c.pos != bytes.len() {
        return Err(HwmError::Format { context: "episode", detail: format!("{} trailing bytes", bytes.len() - c.pos) });
    }
    Ok(Episode { seed, past_tokens, future_tokens, past_latents, future_latents, past_actions, future_actions })
}

fn token_color(t: u32, vocab: usize) -> [u8; 3] {
    let h = crate::rng::derive_seed(t as u64, "palette", 0);
    let [a, b, c, ..] = h.to_le_bytes();
    if (t as usize) >= vocab / 2 {
        // Sprite tokens stand out in saturated warm colors.
        [255, 64 + b / 2, c / 4]
    } else {
        [a / 2 + 32, b / 2 + 32, c / 2 + 64]
    }
}

/// Writes grids as an image: one row per grid, one column per frame,
/// `scale` pixels per cell and a one-cell gap between frames.
pub fn write_token_png(path: &Path, rows: &[&TokenGrid], scale: usize) -> Result<()> {
    let first = rows.first().ok_or_else(|| HwmError::Config("no grids to draw".into()))?;
    let g = first.grid;
    let cols = rows.iter().map(|r| r.frames).max().unwrap_or(0);
    let cell = scale.max(1);
    let width = (cols * (g + 1)).max(1) * cell;
    let height = (rows.len() * (g + 1)).max(1) * cell;
    let mut img = vec![255u8; width * height * 3];
    for (ri, grid) in rows.iter().enumerate() {
        if grid.grid != g {
            return Err(HwmError::dim("png", "grids of different sizes"));
        }
        for k in 0..grid.frames {
            for y in 0..g {
                for x in 0..g {
                    let rgb = token_color(grid.at(k, y, x), grid.vocab);
                    for py in 0..cell {
                        let row = (ri * (g + 1) + y) * cell + py;
                        for px in 0..cell {
                            let col = (k * (g + 1) + x) * cell + px;
                            let o = (row * width + col) * 3;
                            img[o..o + 3].copy_from_slice(&rgb);
                        }
                    }
                }
            }
        }
    }
    let file = File::create(path).map_err(|e| HwmError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fmt = |e: png::EncodingError| HwmError::Format { context: "png", detail: e.to_string() };
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(&img).map_err(fmt)?;
    writer.finish().map_err(fmt)
}
