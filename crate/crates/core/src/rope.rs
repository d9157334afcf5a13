//! Rotary position embeddings over one, two or three position axes.
//!
//! A head of width `head_dim` is cut into consecutive per-axis chunks; inside
//! a chunk of width `d`, the pair `(2i, 2i + 1)` rotates by
//! `pos * base^(-2i / d)`.

use std::sync::Arc;

use crate::error::{HwmError, Result};
use crate::numcore::{Tape, Tensor};
use crate::scalar::Scalar;

pub const DEFAULT_BASE: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RopeSpec {
    pub head_dim: usize,
    /// Width of each axis chunk, in axis order.
    pub axis_dims: Vec<usize>,
    pub base: f64,
}

fn round_even(x: usize) -> usize {
    (x + 1) / 2 * 2
}

impl RopeSpec {
    pub fn new(head_dim: usize, axis_dims: Vec<usize>, base: f64) -> Result<Self> {
        if axis_dims.is_empty() || axis_dims.len() > 3 {
            return Err(HwmError::Config(format!("rope supports 1 to 3 axes, got {}", axis_dims.len())));
        }
        if let Some(&d) = axis_dims.iter().find(|&&d| d < 2 || d % 2 != 0) {
            return Err(HwmError::Config(format!("rope axis width {d} must be even and at least 2")));
        }
        if axis_dims.iter().sum::<usize>() != head_dim {
            return Err(HwmError::Config(format!("rope axis widths {axis_dims:?} do not sum to head dim {head_dim}")));
        }
        if base <= 1.0 {
            return Err(HwmError::Config(format!("rope base must exceed 1, got {base}")));
        }
        Ok(Self { head_dim, axis_dims, base })
    }

    pub fn one_d(head_dim: usize) -> Result<Self> {
        Self::new(head_dim, vec![head_dim], DEFAULT_BASE)
    }

    /// Rows then columns, half the head each.
    pub fn two_d(head_dim: usize) -> Result<Self> {
        let y = round_even(head_dim / 2);
        Self::new(head_dim, vec![y, head_dim.saturating_sub(y)], DEFAULT_BASE)
    }

    /// Time gets half the head, rows and columns a quarter each.
    pub fn three_d(head_dim: usize) -> Result<Self> {
        let t = round_even(head_dim / 2);
        let y = round_even(head_dim / 4);
        Self::new(head_dim, vec![t, y, head_dim.saturating_sub(t + y)], DEFAULT_BASE)
    }

    pub fn axes(&self) -> usize {
        self.axis_dims.len()
    }
}

/// Integer positions, `n x axes`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Positions {
    pub axes: usize,
    pub coords: Vec<i64>,
}

impl Positions {
    pub fn new(axes: usize, coords: Vec<i64>) -> Result<Self> {
        if axes == 0 || coords.len() % axes != 0 {
            return Err(HwmError::dim("positions", format!("{} coordinates for {axes} axes", coords.len())));
        }
        Ok(Self { axes, coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.axes
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn get(&self, i: usize) -> &[i64] {
        &self.coords[i * self.axes..(i + 1) * self.axes]
    }

    /// Keeps only the listed axes, in the given order.
    pub fn select(&self, axes: &[usize]) -> Positions {
        let coords = (0..self.len()).flat_map(|i| axes.iter().map(move |&a| self.get(i)[a])).collect();
        Positions { axes: axes.len(), coords }
    }

    pub fn slice(&self, start: usize, len: usize) -> Positions {
        Positions { axes: self.axes, coords: self.coords[start * self.axes..(start + len) * self.axes].to_vec() }
    }

    pub fn shifted(&self, delta: &[i64]) -> Positions {
        let coords = self.coords.iter().enumerate().map(|(i, &c)| c + delta[i % self.axes]).collect();
        Positions { axes: self.axes, coords }
    }

    pub fn concat(parts: &[&Positions]) -> Result<Positions> {
        let axes = parts.first().map_or(1, |p| p.axes);
        if parts.iter().any(|p| p.axes != axes) {
            return Err(HwmError::dim("positions", "concatenating different axis counts"));
        }
        Ok(Positions { axes, coords: parts.iter().flat_map(|p| p.coords.iter().copied()).collect() })
    }
}

/// Cosine and sine tables, each `n x head_dim / 2`, for the tape's rope kernel.
#[derive(Clone, Debug)]
pub struct RopeTables<T> {
    pub cos: Arc<Vec<T>>,
    pub sin: Arc<Vec<T>>,
}

pub fn rope_tables<T: Scalar>(spec: &RopeSpec, pos: &Positions) -> Result<RopeTables<T>> {
    if pos.axes != spec.axes() {
        return Err(HwmError::dim("rope", format!("{} position axes for a {}-axis spec", pos.axes, spec.axes())));
    }
    let half = spec.head_dim / 2;
    let mut cos = Vec::with_capacity(pos.len() * half);
    let mut sin = Vec::with_capacity(pos.len() * half);
    for i in 0..pos.len() {
        let p = pos.get(i);
        for (a, &d) in spec.axis_dims.iter().enumerate() {
            for k in 0..d / 2 {
                let freq = spec.base.powf(-2.0 * k as f64 / d as f64);
                let angle = p[a] as f64 * freq;
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
    }
    Ok(RopeTables { cos: Arc::new(cos), sin: Arc::new(sin) })
}

/// Rotates `x [.., n, heads * head_dim]` by the given positions, outside any tape.
pub fn rope_apply<T: Scalar>(x: &Tensor<T>, pos: &Positions, spec: &RopeSpec) -> Result<Tensor<T>> {
    let tables = rope_tables::<T>(spec, pos)?;
    let mut tape = Tape::new();
    let v = tape.constant(x.clone())?;
    let y = tape.rope(v, tables.cos, tables.sin)?;
    Ok(tape.value(y).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamKind {
    Video,
    Action,
}

/// Extent of one token stream on the shared time axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamExtent {
    pub kind: StreamKind,
    pub t0: i64,
    pub frames: usize,
    /// Spatial extents; 1 x 1 for actions.
    pub rows: usize,
    pub cols: usize,
}

impl StreamExtent {
    pub fn tokens(&self) -> usize {
        self.frames * self.rows * self.cols
    }
}

/// Ordered streams whose tokens are concatenated before positions are assigned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamLayout {
    pub streams: Vec<StreamExtent>,
}

impl StreamLayout {
    /// The four episode streams in order `v_p, v_f, a_p, a_f`; past frames
    /// occupy `t in [0, tp)` and future frames `t in [tp, tp + tf)`.
    pub fn episode(tp: usize, tf: usize, rows: usize, cols: usize) -> Self {
        let v = |t0: usize, frames| StreamExtent { kind: StreamKind::Video, t0: t0 as i64, frames, rows, cols };
        let a = |t0: usize, frames| StreamExtent { kind: StreamKind::Action, t0: t0 as i64, frames, rows: 1, cols: 1 };
        Self { streams: vec![v(0, tp), v(tp, tf), a(0, tp), a(tp, tf)] }
    }

    pub fn tokens(&self) -> usize {
        self.streams.iter().map(StreamExtent::tokens).sum()
    }
}

/// `(t, y, x)` for every token of the concatenated streams. Video tokens are
/// frame-major then row-major; action tokens sit at `(t, 0, 0)`.
pub fn build_positions(layout: &StreamLayout) -> Result<Positions> {
    for (i, a) in layout.streams.iter().enumerate() {
        for b in &layout.streams[i + 1..] {
            let overlap = a.t0 < b.t0 + b.frames as i64 && b.t0 < a.t0 + a.frames as i64;
            if a.kind == b.kind && overlap {
                return Err(HwmError::Layout(format!(
                    "{:?} streams overlap in time: [{}, {}) and [{}, {})",
                    a.kind,
                    a.t0,
                    a.t0 + a.frames as i64,
                    b.t0,
                    b.t0 + b.frames as i64
                )));
            }
        }
    }
    let mut coords = Vec::with_capacity(layout.tokens() * 3);
    for s in &layout.streams {
        for f in 0..s.frames {
            for y in 0..s.rows {
                for x in 0..s.cols {
                    coords.extend_from_slice(&[s.t0 + f as i64, y as i64, x as i64]);
                }
            }
        }
    }
    Positions::new(3, coords)
}
