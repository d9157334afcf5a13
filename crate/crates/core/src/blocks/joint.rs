use super::layers::stream_paths;
use super::{per_run, BlockConfig, Decl, Fwd, Geometry, Linear, Mlp, RopeSet};
use crate::error::Result;
use crate::numcore::Var;
use crate::scalar::Scalar;

/// One stream's weights in a joint-attention block.
#[derive(Clone, Copy, Debug)]
pub struct JointStream {
    /// `time_dim -> 6h`: scale, shift, gate for attention then MLP.
    pub modulation: Linear,
    pub qkv: Linear,
    pub out: Linear,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct JointParams {
    pub layer: usize,
    pub canon: [usize; 4],
    pub streams: [JointStream; 4],
}

impl JointParams {
    pub fn declare(decl: &mut Decl<'_>, cfg: &BlockConfig, layer: usize) -> Self {
        let canon = cfg.canonical_map(layer);
        let h = cfg.dim;
        let streams = [0, 1, 2, 3].map(|s| {
            let c = canon[s];
            let path = |part: &str| stream_paths(layer, s, c, part);
            let (n, a) = path("mod");
            let modulation = decl.modulation(&n, a.as_deref(), cfg.time_dim, 6 * h);
            let (n, a) = path("attn.qkv");
            let qkv = decl.linear(&n, a.as_deref(), h, 3 * h);
            let (n, a) = path("attn.out");
            let out = decl.linear(&n, a.as_deref(), h, h);
            let (n, a) = path("mlp");
            let mlp = decl.mlp(&n, a.as_deref(), h, cfg.mlp_hidden);
            JointStream { modulation, qkv, out, mlp }
        });
        Self { layer, canon, streams }
    }
}

pub(super) fn forward<T: Scalar>(
    f: &mut Fwd<'_, T>,
    p: &JointParams,
    cfg: &BlockConfig,
    x: Var,
    cond: Var,
    geo: &Geometry,
    rope: &RopeSet<T>,
) -> Result<Var> {
    let bounds = geo.bounds();
    let mut mods: [Option<Vec<Var>>; 4] = Default::default();
    for s in 0..4 {
        let c = p.canon[s];
        if mods[c].is_none() {
            let m = f.linear(cond, &p.streams[c].modulation)?;
            mods[c] = Some(f.chunks(m, 6)?);
        }
    }
    let m = |c: usize, i: usize| mods[c].as_ref().expect("modulation computed")[i];

    let qkv = per_run(f, x, &bounds, &p.canon, |f, xs, c| {
        let n = f.norm(xs, None)?;
        let n = f.modulate(n, m(c, 0), m(c, 1))?;
        f.linear(n, &p.streams[c].qkv)
    })?;
    let (q, k, v) = f.split3(qkv)?;
    let q = f.rope(q, &rope.joint)?;
    let k = f.rope(k, &rope.joint)?;
    let att = f.tape.attention(q, k, v, cfg.heads)?;

    // Residual branches are computed per run so each run uses its own weights.
    let joined = f.tape.concat(&[x, att], 2)?;
    let h = cfg.dim;
    per_run(f, joined, &bounds, &p.canon, |f, xa, c| {
        let xs = f.tape.slice(xa, 2, 0, h)?;
        let a = f.tape.slice(xa, 2, h, h)?;
        let o = f.linear(a, &p.streams[c].out)?;
        let xs = f.gated_residual(xs, o, m(c, 2))?;
        let n = f.norm(xs, None)?;
        let n = f.modulate(n, m(c, 3), m(c, 4))?;
        let y = f.mlp(n, &p.streams[c].mlp)?;
        f.gated_residual(xs, y, m(c, 5))
    })
}
