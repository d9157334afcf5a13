//! Space-time factorized blocks of the masked family.
//!
//! Spatial attention runs within each frame of the video streams. Temporal
//! attention runs along time at each spatial site; action tokens are
//! broadcast to every site and their outputs averaged back over sites.

use super::layers::stream_paths;
use super::split::CONTEXT;
use super::{per_run, BlockConfig, Decl, Fwd, Geometry, Linear, Mlp, Norm, RopeSet, AP, VF, VP};
use crate::error::Result;
use crate::numcore::Var;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct AttnWeights {
    pub qkv: Linear,
    pub out: Linear,
}

impl AttnWeights {
    fn declare(decl: &mut Decl<'_>, prefix: &str, h: usize) -> Self {
        Self {
            qkv: decl.linear(&format!("{prefix}.qkv"), None, h, 3 * h),
            out: decl.linear(&format!("{prefix}.out"), None, h, h),
        }
    }
}

/// Per-stream norms and MLP. `norm1` exists on video streams only.
#[derive(Clone, Copy, Debug)]
pub struct FactorizedStream {
    pub norm1: Option<Norm>,
    pub norm2: Norm,
    pub norm3: Norm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct FactorizedParams {
    pub layer: usize,
    pub canon: [usize; 4],
    pub spatial: AttnWeights,
    pub temporal: AttnWeights,
    pub streams: [FactorizedStream; 4],
}

impl FactorizedParams {
    pub fn declare(decl: &mut Decl<'_>, cfg: &BlockConfig, layer: usize) -> Self {
        let h = cfg.dim;
        let canon = cfg.canonical_map(layer);
        let spatial = AttnWeights::declare(decl, &format!("blocks.{layer}.spatial"), h);
        let temporal = AttnWeights::declare(decl, &format!("blocks.{layer}.temporal"), h);
        let streams = [0, 1, 2, 3].map(|s| {
            let path = |part: &str| stream_paths(layer, s, canon[s], part);
            let norm1 = (s < AP).then(|| {
                let (n, a) = path("norm1");
                decl.norm(&n, a.as_deref(), h)
            });
            let (n, a) = path("norm2");
            let norm2 = decl.norm(&n, a.as_deref(), h);
            let (n, a) = path("norm3");
            let norm3 = decl.norm(&n, a.as_deref(), h);
            let (n, a) = path("mlp");
            let mlp = decl.mlp(&n, a.as_deref(), h, cfg.mlp_hidden);
            FactorizedStream { norm1, norm2, norm3, mlp }
        });
        Self { layer, canon, spatial, temporal, streams }
    }
}

/// Split variant: temporal self-attention stays within each stream, then
/// `v_f` cross-attends at each site to `v_p`, `a_p`, `a_f`. Only `v_f` has an MLP.
#[derive(Clone, Debug)]
pub struct FactorizedSplitParams {
    pub layer: usize,
    pub spatial: AttnWeights,
    pub temporal: AttnWeights,
    pub norm1: [Norm; 2],
    pub norm2: [Norm; 4],
    pub norm_cross: [Norm; 4],
    pub q: Linear,
    pub cross_out: Linear,
    /// Indexed by stream; the `v_f` slot is unused.
    pub kv: [Option<Linear>; 4],
    pub norm3: Norm,
    pub mlp: Mlp,
}

impl FactorizedSplitParams {
    pub fn declare(decl: &mut Decl<'_>, cfg: &BlockConfig, layer: usize) -> Self {
        let h = cfg.dim;
        let own = |s: usize, part: &str| stream_paths(layer, s, s, part).0;
        let spatial = AttnWeights::declare(decl, &format!("blocks.{layer}.spatial"), h);
        let temporal = AttnWeights::declare(decl, &format!("blocks.{layer}.temporal"), h);
        let norm1 = [VP, VF].map(|s| decl.norm(&own(s, "norm1"), None, h));
        let norm2 = [0, 1, 2, 3].map(|s| decl.norm(&own(s, "norm2"), None, h));
        let norm_cross = [0, 1, 2, 3].map(|s| decl.norm(&own(s, "norm_cross"), None, h));
        let q = decl.linear(&own(VF, "cross.q"), None, h, h);
        let cross_out = decl.linear(&own(VF, "cross.out"), None, h, h);
        let mut kv = [None; 4];
        for s in CONTEXT {
            kv[s] = Some(decl.linear(&own(s, "cross.kv"), None, h, 2 * h));
        }
        let norm3 = decl.norm(&own(VF, "norm3"), None, h);
        let mlp = decl.mlp(&own(VF, "mlp"), None, h, cfg.mlp_hidden);
        Self { layer, spatial, temporal, norm1, norm2, norm_cross, q, cross_out, kv, norm3, mlp }
    }
}

/// Per-frame spatial attention over the video part of `x`.
pub(super) fn spatial<T: Scalar>(
    f: &mut Fwd<'_, T>,
    cfg: &BlockConfig,
    x: Var,
    geo: &Geometry,
    attn: &AttnWeights,
    norm1: &[Norm],
    canon: &[usize],
    rope: &RopeSet<T>,
) -> Result<Var> {
    let b = geo.bounds();
    let (bsz, h, hw, t) = (f.tape.shape(x)[0], cfg.dim, geo.hw(), geo.frames());
    let v = geo.video_tokens();
    let xv = f.tape.slice(x, 1, 0, v)?;
    let xa = f.tape.slice(x, 1, v, t)?;
    let n = per_run(f, xv, &b[..3], canon, |f, xs, c| f.norm(xs, Some(&norm1[c])))?;
    let n = f.tape.reshape(n, &[bsz * t, hw, h])?;
    let qkv = f.linear(n, &attn.qkv)?;
    let (q, k, vv) = f.split3(qkv)?;
    let q = f.rope(q, &rope.spatial)?;
    let k = f.rope(k, &rope.spatial)?;
    let a = f.tape.attention(q, k, vv, cfg.heads)?;
    let a = f.tape.reshape(a, &[bsz, v, h])?;
    let o = f.linear(a, &attn.out)?;
    let xv = f.tape.add(xv, o)?;
    f.tape.concat(&[xv, xa], 1)
}

/// `[B, T*HW, w]` frame-major video to `[B*HW, T, w]` site-major sequences.
fn to_sites<T: Scalar>(f: &mut Fwd<'_, T>, x: Var, t: usize, hw: usize) -> Result<Var> {
    let s = f.tape.shape(x).to_vec();
    let (bsz, w) = (s[0], s[2]);
    let r = f.tape.reshape(x, &[bsz, t, hw, w])?;
    let p = f.tape.permute(r, &[0, 2, 1, 3])?;
    f.tape.reshape(p, &[bsz * hw, t, w])
}

fn from_sites<T: Scalar>(f: &mut Fwd<'_, T>, x: Var, bsz: usize, t: usize, hw: usize) -> Result<Var> {
    let w = f.tape.shape(x)[2];
    let r = f.tape.reshape(x, &[bsz, hw, t, w])?;
    let p = f.tape.permute(r, &[0, 2, 1, 3])?;
    f.tape.reshape(p, &[bsz, t * hw, w])
}

/// `[B, T, w]` action tokens repeated at every site: `[B, HW, T, w]`.
fn actions_at_sites<T: Scalar>(f: &mut Fwd<'_, T>, x: Var, hw: usize) -> Result<Var> {
    f.tape.expand_axis(x, 1, hw)
}

pub(super) fn forward<T: Scalar>(
    f: &mut Fwd<'_, T>,
    p: &FactorizedParams,
    cfg: &BlockConfig,
    x: Var,
    geo: &Geometry,
    rope: &RopeSet<T>,
) -> Result<Var> {
    let b = geo.bounds();
    let (bsz, h, hw, t) = (f.tape.shape(x)[0], cfg.dim, geo.hw(), geo.frames());
    let v = geo.video_tokens();
    let norm1: Vec<Norm> = p.streams[..2].iter().map(|s| s.norm1.expect("video norm")).collect();
    let x = spatial(f, cfg, x, geo, &p.spatial, &norm1, &p.canon[..2], rope)?;

    let n = per_run(f, x, &b, &p.canon, |f, xs, c| f.norm(xs, Some(&p.streams[c].norm2)))?;
    let qkv = f.linear(n, &p.temporal.qkv)?;
    let qv = f.tape.slice(qkv, 1, 0, v)?;
    let qv = f.tape.reshape(qv, &[bsz, t, hw, 3 * h])?;
    let qv = f.tape.permute(qv, &[0, 2, 1, 3])?;
    let qa = f.tape.slice(qkv, 1, v, t)?;
    let qa = actions_at_sites(f, qa, hw)?;
    let seq = f.tape.concat(&[qv, qa], 2)?;
    let seq = f.tape.reshape(seq, &[bsz * hw, 2 * t, 3 * h])?;
    let (q, k, vv) = f.split3(seq)?;
    let q = f.rope(q, &rope.temporal_joint)?;
    let k = f.rope(k, &rope.temporal_joint)?;
    let a = f.tape.attention(q, k, vv, cfg.heads)?;
    let a = f.tape.reshape(a, &[bsz, hw, 2 * t, h])?;
    let av = f.tape.slice(a, 2, 0, t)?;
    let av = f.tape.reshape(av, &[bsz * hw, t, h])?;
    let av = from_sites(f, av, bsz, t, hw)?;
    let aa = f.tape.slice(a, 2, t, t)?;
    let aa = f.tape.mean_axis(aa, 1)?;
    let a = f.tape.concat(&[av, aa], 1)?;
    let o = f.linear(a, &p.temporal.out)?;
    let x = f.tape.add(x, o)?;

    per_run(f, x, &b, &p.canon, |f, xs, c| {
        let n = f.norm(xs, Some(&p.streams[c].norm3))?;
        let y = f.mlp(n, &p.streams[c].mlp)?;
        f.tape.add(xs, y)
    })
}

pub(super) fn forward_split<T: Scalar>(
    f: &mut Fwd<'_, T>,
    p: &FactorizedSplitParams,
    cfg: &BlockConfig,
    x: Var,
    geo: &Geometry,
    rope: &RopeSet<T>,
) -> Result<Var> {
    let b = geo.bounds();
    let (bsz, h, hw) = (f.tape.shape(x)[0], cfg.dim, geo.hw());
    let frames = [geo.tp, geo.tf, geo.tp, geo.tf];
    let x = spatial(f, cfg, x, geo, &p.spatial, &p.norm1, &[VP, VF], rope)?;

    let n = per_run(f, x, &b, &[0, 1, 2, 3], |f, xs, c| f.norm(xs, Some(&p.norm2[c])))?;
    let qkv = f.linear(n, &p.temporal.qkv)?;
    let mut outs = Vec::with_capacity(4);
    for s in 0..4 {
        let part = f.tape.slice(qkv, 1, b[s], b[s + 1] - b[s])?;
        let seq = if s < AP { to_sites(f, part, frames[s], hw)? } else { part };
        let (q, k, vv) = f.split3(seq)?;
        let q = f.rope(q, &rope.temporal_stream[s])?;
        let k = f.rope(k, &rope.temporal_stream[s])?;
        let a = f.tape.attention(q, k, vv, cfg.heads)?;
        outs.push(if s < AP { from_sites(f, a, bsz, frames[s], hw)? } else { a });
    }
    let a = f.tape.concat(&outs, 1)?;
    let o = f.linear(a, &p.temporal.out)?;
    let x = f.tape.add(x, o)?;

    let mut xs = [x; 4];
    for (s, slot) in xs.iter_mut().enumerate() {
        *slot = f.tape.slice(x, 1, b[s], b[s + 1] - b[s])?;
    }
    let n = f.norm(xs[VF], Some(&p.norm_cross[VF]))?;
    let q = f.linear(n, &p.q)?;
    let q = to_sites(f, q, geo.tf, hw)?;
    let q = f.rope(q, &rope.temporal_stream[VF])?;
    let mut ctx = Vec::with_capacity(3);
    for s in CONTEXT {
        let n = f.norm(xs[s], Some(&p.norm_cross[s]))?;
        let kv = f.linear(n, p.kv[s].as_ref().expect("context key/value map"))?;
        let kv = if s == VP {
            let r = f.tape.reshape(kv, &[bsz, frames[s], hw, 2 * h])?;
            f.tape.permute(r, &[0, 2, 1, 3])?
        } else {
            actions_at_sites(f, kv, hw)?
        };
        ctx.push(kv);
    }
    let kv = f.tape.concat(&ctx, 2)?;
    let nk = f.tape.shape(kv)[2];
    let kv = f.tape.reshape(kv, &[bsz * hw, nk, 2 * h])?;
    let (k, vv) = f.split2(kv)?;
    let k = f.rope(k, &rope.temporal_context)?;
    let a = f.tape.attention(q, k, vv, cfg.heads)?;
    let a = from_sites(f, a, bsz, geo.tf, hw)?;
    let o = f.linear(a, &p.cross_out)?;
    let vf = f.tape.add(xs[VF], o)?;

    let n = f.norm(vf, Some(&p.norm3))?;
    let y = f.mlp(n, &p.mlp)?;
    xs[VF] = f.tape.add(vf, y)?;
    f.tape.concat(&xs, 1)
}
