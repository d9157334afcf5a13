//! Transformer block variants over the four token streams, parameter
//! sharing plans and parameter accounting.
//!
//! All blocks work on one joined sequence `[B, N, h]` whose streams sit in
//! the fixed order `v_p, v_f, a_p, a_f`. Video streams are frame-major.

pub(crate) mod factorized;
mod joint;
mod layers;
mod split;
pub mod timestep;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use factorized::{FactorizedParams, FactorizedSplitParams};
pub use joint::JointParams;
pub use layers::{Decl, Fwd, Linear, Mlp, Norm};
pub use split::SplitParams;

use crate::error::{HwmError, Result};
use crate::numcore::{ParamLayout, Var};
use crate::rope::{build_positions, rope_tables, Positions, RopeSpec, RopeTables, StreamLayout};
use crate::scalar::Scalar;

pub const STREAM_NAMES: [&str; 4] = ["v_p", "v_f", "a_p", "a_f"];
pub const VP: usize = 0;
pub const VF: usize = 1;
pub const AP: usize = 2;
pub const AF: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Base,
    Split,
    #[serde(rename = "modshare")]
    ModalityShare,
    #[serde(rename = "fullshare")]
    FullShare,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::Split, Variant::ModalityShare, Variant::FullShare];

    pub fn slug(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Split => "split",
            Variant::ModalityShare => "modshare",
            Variant::FullShare => "fullshare",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Base => "Base Block",
            Variant::Split => "Split Attention",
            Variant::ModalityShare => "Modality Sharing",
            Variant::FullShare => "Full Sharing",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub variant: Variant,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// First layer index at which sharing plans take effect.
    pub share_boundary: usize,
    /// Flow blocks are time-modulated; masked blocks are factorized and unmodulated.
    pub time_modulation: bool,
    /// Width of the time embedding feeding the modulation maps.
    pub time_dim: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(HwmError::Config(format!("block dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.share_boundary > self.layers {
            return Err(HwmError::Config(format!(
                "share boundary {} exceeds layer count {}",
                self.share_boundary, self.layers
            )));
        }
        if self.layers == 0 || self.mlp_hidden == 0 {
            return Err(HwmError::Config("blocks need at least one layer and a positive MLP width".into()));
        }
        if self.time_modulation && self.time_dim == 0 {
            return Err(HwmError::Config("time modulation needs a positive time dim".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Stream whose parameters stream `s` uses in `layer`.
    pub fn canonical(&self, layer: usize, s: usize) -> usize {
        if layer < self.share_boundary {
            return s;
        }
        match self.variant {
            Variant::Base | Variant::Split => s,
            Variant::FullShare => VP,
            Variant::ModalityShare => {
                if s < AP {
                    VP
                } else {
                    AP
                }
            }
        }
    }

    pub fn canonical_map(&self, layer: usize) -> [usize; 4] {
        [0, 1, 2, 3].map(|s| self.canonical(layer, s))
    }
}

/// Alias path to canonical path for every shared block parameter.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SharingPlan {
    pub aliases: BTreeMap<String, String>,
}

impl SharingPlan {
    pub fn from_layout(layout: &ParamLayout) -> Self {
        let aliases = layout
            .records()
            .filter_map(|r| r.shared_with.map(|c| (r.name.to_string(), c.to_string())))
            .collect();
        Self { aliases }
    }

    pub fn is_empty(&self) -> bool {
        self.aliases.is_empty()
    }
}

/// Declared parameters of one block, by family and variant.
#[derive(Clone, Debug)]
pub enum BlockParams {
    Joint(JointParams),
    Split(SplitParams),
    Factorized(FactorizedParams),
    FactorizedSplit(FactorizedSplitParams),
}

/// Declares every layer of a block stack under `blocks.{l}.`.
pub fn declare_blocks(decl: &mut Decl<'_>, cfg: &BlockConfig) -> Result<Vec<BlockParams>> {
    cfg.validate()?;
    (0..cfg.layers)
        .map(|l| {
            Ok(match (cfg.time_modulation, cfg.variant) {
                (true, Variant::Split) => BlockParams::Split(SplitParams::declare(decl, cfg, l)),
                (true, _) => BlockParams::Joint(JointParams::declare(decl, cfg, l)),
                (false, Variant::Split) => BlockParams::FactorizedSplit(FactorizedSplitParams::declare(decl, cfg, l)),
                (false, _) => BlockParams::Factorized(FactorizedParams::declare(decl, cfg, l)),
            })
        })
        .collect()
}

/// Alias map of a block stack, built from its declared layout.
pub fn make_sharing_plan(cfg: &BlockConfig) -> Result<SharingPlan> {
    let mut layout = ParamLayout::new();
    declare_blocks(&mut Decl::new(&mut layout), cfg)?;
    Ok(SharingPlan::from_layout(&layout))
}

/// Unique parameter count of a block stack alone.
pub fn count_block_parameters(cfg: &BlockConfig) -> Result<usize> {
    let mut layout = ParamLayout::new();
    declare_blocks(&mut Decl::new(&mut layout), cfg)?;
    Ok(layout.count())
}

/// Token extents of an episode in model units (patches for flow, latent
/// cells for masked).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub tp: usize,
    pub tf: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Geometry {
    pub fn frames(&self) -> usize {
        self.tp + self.tf
    }

    pub fn hw(&self) -> usize {
        self.rows * self.cols
    }

    pub fn video_tokens(&self) -> usize {
        self.frames() * self.hw()
    }

    pub fn tokens(&self) -> usize {
        self.video_tokens() + self.frames()
    }

    /// Start offsets of the four streams plus the total length.
    pub fn bounds(&self) -> [usize; 5] {
        let hw = self.hw();
        let v = self.video_tokens();
        [0, self.tp * hw, v, v + self.tp, v + self.frames()]
    }

    pub fn stream_len(&self, s: usize) -> usize {
        let b = self.bounds();
        b[s + 1] - b[s]
    }

    pub fn layout(&self) -> StreamLayout {
        StreamLayout::episode(self.tp, self.tf, self.rows, self.cols)
    }
}

/// Precomputed rotation tables for every attention pattern the blocks use.
#[derive(Clone, Debug)]
pub struct RopeSet<T> {
    /// 3D over the joined sequence (flow).
    pub joint: RopeTables<T>,
    /// 3D per stream (flow split).
    pub per_stream: [RopeTables<T>; 4],
    /// 3D over the split-attention context `v_p, a_p, a_f`.
    pub context: RopeTables<T>,
    /// 2D over one frame (masked spatial attention).
    pub spatial: RopeTables<T>,
    /// 1D over `[video frames, action frames]` at one site (masked temporal).
    pub temporal_joint: RopeTables<T>,
    /// 1D per stream (masked split).
    pub temporal_stream: [RopeTables<T>; 4],
    /// 1D over the masked split context `v_p, a_p, a_f` at one site.
    pub temporal_context: RopeTables<T>,
}

impl<T: Scalar> RopeSet<T> {
    pub fn new(cfg: &BlockConfig, geo: &Geometry) -> Result<Arc<Self>> {
        let hd = cfg.head_dim();
        let pos = build_positions(&geo.layout())?;
        let b = geo.bounds();
        let stream = |s: usize| pos.slice(b[s], b[s + 1] - b[s]);
        let t_of = |p: &Positions| p.select(&[0]);
        let frames = |t0: usize, n: usize| Positions::new(1, (t0..t0 + n).map(|t| t as i64).collect());
        let one = |p: &Positions| -> Result<RopeTables<T>> { rope_tables(&RopeSpec::one_d(hd)?, p) };
        let (tp, tf) = (geo.tp, geo.tf);
        let all_t = frames(0, tp + tf)?;
        let ctx = Positions::concat(&[&stream(VP), &stream(AP), &stream(AF)])?;
        let t_ctx = Positions::concat(&[&frames(0, tp)?, &frames(0, tp)?, &frames(tp, tf)?])?;
        if cfg.time_modulation {
            let spec = RopeSpec::three_d(hd)?;
            let three = |p: &Positions| rope_tables(&spec, p);
            let per_stream = [three(&stream(VP))?, three(&stream(VF))?, three(&stream(AP))?, three(&stream(AF))?];
            let empty = RopeTables { cos: Arc::new(vec![]), sin: Arc::new(vec![]) };
            return Ok(Arc::new(Self {
                joint: three(&pos)?,
                per_stream,
                context: three(&ctx)?,
                spatial: empty.clone(),
                temporal_joint: empty.clone(),
                temporal_stream: [empty.clone(), empty.clone(), empty.clone(), empty.clone()],
                temporal_context: empty,
            }));
        }
        let frame0 = pos.slice(0, geo.hw()).select(&[1, 2]);
        let empty = RopeTables { cos: Arc::new(vec![]), sin: Arc::new(vec![]) };
        Ok(Arc::new(Self {
            joint: empty.clone(),
            per_stream: [empty.clone(), empty.clone(), empty.clone(), empty.clone()],
            context: empty,
            spatial: rope_tables(&RopeSpec::two_d(hd)?, &frame0)?,
            temporal_joint: one(&Positions::concat(&[&all_t, &all_t])?)?,
            temporal_stream: [
                one(&frames(0, tp)?)?,
                one(&frames(tp, tf)?)?,
                one(&t_of(&stream(AP)))?,
                one(&t_of(&stream(AF)))?,
            ],
            temporal_context: one(&t_ctx)?,
        }))
    }
}

/// Runs one block over the joined sequence `x [B, N, h]`.
///
/// `cond` is the activated time embedding `[B, time_dim]` for flow blocks.
pub fn block_forward<T: Scalar>(
    f: &mut Fwd<'_, T>,
    params: &BlockParams,
    cfg: &BlockConfig,
    x: Var,
    cond: Option<Var>,
    geo: &Geometry,
    rope: &RopeSet<T>,
) -> Result<Var> {
    let need_cond = || cond.ok_or_else(|| HwmError::Config("time-modulated block needs a time embedding".into()));
    match params {
        BlockParams::Joint(p) => joint::forward(f, p, cfg, x, need_cond()?, geo, rope),
        BlockParams::Split(p) => split::forward(f, p, cfg, x, need_cond()?, geo, rope),
        BlockParams::Factorized(p) => factorized::forward(f, p, cfg, x, geo, rope),
        BlockParams::FactorizedSplit(p) => factorized::forward_split(f, p, cfg, x, geo, rope),
    }
}

/// The four streams as separate tensors plus their geometry.
#[derive(Clone, Copy, Debug)]
pub struct StreamBundle {
    pub streams: [Var; 4],
    pub geometry: Geometry,
}

impl StreamBundle {
    pub fn join<T: Scalar>(&self, f: &mut Fwd<'_, T>) -> Result<Var> {
        f.tape.concat(&self.streams, 1)
    }

    pub fn split<T: Scalar>(f: &mut Fwd<'_, T>, x: Var, geometry: Geometry) -> Result<Self> {
        let b = geometry.bounds();
        let mut streams = [x; 4];
        for (s, slot) in streams.iter_mut().enumerate() {
            *slot = f.tape.slice(x, 1, b[s], b[s + 1] - b[s])?;
        }
        Ok(Self { streams, geometry })
    }
}

fn bundle_forward<T: Scalar>(
    f: &mut Fwd<'_, T>,
    params: &BlockParams,
    cfg: &BlockConfig,
    bundle: &StreamBundle,
    cond: Option<Var>,
) -> Result<StreamBundle> {
    let rope = RopeSet::new(cfg, &bundle.geometry)?;
    let x = bundle.join(f)?;
    let y = block_forward(f, params, cfg, x, cond, &bundle.geometry, &rope)?;
    StreamBundle::split(f, y, bundle.geometry)
}

/// Joint-attention block (flow family; Base, Modality or Full sharing).
pub fn base_block_forward<T: Scalar>(
    f: &mut Fwd<'_, T>,
    params: &JointParams,
    cfg: &BlockConfig,
    bundle: &StreamBundle,
    t_embed: Var,
) -> Result<StreamBundle> {
    bundle_forward(f, &BlockParams::Joint(params.clone()), cfg, bundle, Some(t_embed))
}

/// Self-attention per stream then `v_f` cross-attention over the context.
pub fn split_block_forward<T: Scalar>(
    f: &mut Fwd<'_, T>,
    params: &SplitParams,
    cfg: &BlockConfig,
    bundle: &StreamBundle,
    t_embed: Var,
) -> Result<StreamBundle> {
    bundle_forward(f, &BlockParams::Split(params.clone()), cfg, bundle, Some(t_embed))
}

/// Spatial attention per frame then joint temporal attention per site (masked family).
pub fn factorized_st_block_forward<T: Scalar>(
    f: &mut Fwd<'_, T>,
    params: &FactorizedParams,
    cfg: &BlockConfig,
    bundle: &StreamBundle,
) -> Result<StreamBundle> {
    bundle_forward(f, &BlockParams::Factorized(params.clone()), cfg, bundle, None)
}

/// Runs `op` on contiguous runs of streams that share parameters and joins the
/// results. `op` receives the run's tokens and its canonical stream.
pub(crate) fn per_run<T: Scalar>(
    f: &mut Fwd<'_, T>,
    x: Var,
    bounds: &[usize],
    canon: &[usize],
    mut op: impl FnMut(&mut Fwd<'_, T>, Var, usize) -> Result<Var>,
) -> Result<Var> {
    let mut runs: Vec<(usize, usize, usize)> = Vec::new();
    for (s, &c) in canon.iter().enumerate() {
        match runs.last_mut() {
            Some((_, end, rc)) if *rc == c => *end = bounds[s + 1],
            _ => runs.push((bounds[s], bounds[s + 1], c)),
        }
    }
    let total = bounds[canon.len()] - bounds[0];
    if runs.len() == 1 && total == f.tape.shape(x)[1] {
        return op(f, x, runs[0].2);
    }
    let mut outs = Vec::with_capacity(runs.len());
    for (start, end, c) in runs {
        let part = f.tape.slice(x, 1, start, end - start)?;
        outs.push(op(f, part, c)?);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    f.tape.concat(&outs, 1)
}
