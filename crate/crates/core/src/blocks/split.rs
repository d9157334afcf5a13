use super::layers::stream_paths;
use super::{BlockConfig, Decl, Fwd, Geometry, Linear, Mlp, RopeSet, AF, AP, VF, VP};
use crate::error::Result;
use crate::numcore::Var;
use crate::scalar::Scalar;

/// Context stream weights: self-attention plus a key/value map for `v_f`.
#[derive(Clone, Copy, Debug)]
pub struct ContextStream {
    /// `time_dim -> 5h`: self-attention scale, shift, gate; context scale, shift.
    pub modulation: Linear,
    pub qkv: Linear,
    pub out: Linear,
    pub kv: Linear,
}

/// Future-video weights: self-attention, cross-attention and the only MLP.
#[derive(Clone, Copy, Debug)]
pub struct TargetStream {
    /// `time_dim -> 9h`: scale, shift, gate for self-attention, cross-attention, MLP.
    pub modulation: Linear,
    pub qkv: Linear,
    pub out: Linear,
    pub q: Linear,
    pub cross_out: Linear,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct SplitParams {
    pub layer: usize,
    pub target: TargetStream,
    /// Indexed by stream; the `v_f` slot is unused.
    pub context: [Option<ContextStream>; 4],
}

pub(super) const CONTEXT: [usize; 3] = [VP, AP, AF];

impl SplitParams {
    pub fn declare(decl: &mut Decl<'_>, cfg: &BlockConfig, layer: usize) -> Self {
        let h = cfg.dim;
        let own = |s: usize, part: &str| stream_paths(layer, s, s, part).0;
        let target = TargetStream {
            modulation: decl.modulation(&own(VF, "mod"), None, cfg.time_dim, 9 * h),
            qkv: decl.linear(&own(VF, "attn.qkv"), None, h, 3 * h),
            out: decl.linear(&own(VF, "attn.out"), None, h, h),
            q: decl.linear(&own(VF, "cross.q"), None, h, h),
            cross_out: decl.linear(&own(VF, "cross.out"), None, h, h),
            mlp: decl.mlp(&own(VF, "mlp"), None, h, cfg.mlp_hidden),
        };
        let mut context = [None; 4];
        for s in CONTEXT {
            context[s] = Some(ContextStream {
                modulation: decl.modulation(&own(s, "mod"), None, cfg.time_dim, 5 * h),
                qkv: decl.linear(&own(s, "attn.qkv"), None, h, 3 * h),
                out: decl.linear(&own(s, "attn.out"), None, h, h),
                kv: decl.linear(&own(s, "cross.kv"), None, h, 2 * h),
            });
        }
        Self { layer, target, context }
    }
}

fn self_attention<T: Scalar>(
    f: &mut Fwd<'_, T>,
    cfg: &BlockConfig,
    x: Var,
    m: &[Var],
    qkv: &Linear,
    out: &Linear,
    rope: &crate::rope::RopeTables<T>,
) -> Result<Var> {
    let n = f.norm(x, None)?;
    let n = f.modulate(n, m[0], m[1])?;
    let qkv = f.linear(n, qkv)?;
    let (q, k, v) = f.split3(qkv)?;
    let q = f.rope(q, rope)?;
    let k = f.rope(k, rope)?;
    let a = f.tape.attention(q, k, v, cfg.heads)?;
    let o = f.linear(a, out)?;
    f.gated_residual(x, o, m[2])
}

pub(super) fn forward<T: Scalar>(
    f: &mut Fwd<'_, T>,
    p: &SplitParams,
    cfg: &BlockConfig,
    x: Var,
    cond: Var,
    geo: &Geometry,
    rope: &RopeSet<T>,
) -> Result<Var> {
    let b = geo.bounds();
    let mut xs = [x; 4];
    for (s, slot) in xs.iter_mut().enumerate() {
        *slot = f.tape.slice(x, 1, b[s], b[s + 1] - b[s])?;
    }
    let tm = f.linear(cond, &p.target.modulation)?;
    let tm = f.chunks(tm, 9)?;
    let mut cms: [Vec<Var>; 4] = Default::default();
    for s in CONTEXT {
        let c = p.context[s].as_ref().expect("context stream declared");
        let m = f.linear(cond, &c.modulation)?;
        cms[s] = f.chunks(m, 5)?;
        xs[s] = self_attention(f, cfg, xs[s], &cms[s], &c.qkv, &c.out, &rope.per_stream[s])?;
    }
    xs[VF] = self_attention(f, cfg, xs[VF], &tm[0..3], &p.target.qkv, &p.target.out, &rope.per_stream[VF])?;

    let n = f.norm(xs[VF], None)?;
    let n = f.modulate(n, tm[3], tm[4])?;
    let q = f.linear(n, &p.target.q)?;
    let q = f.rope(q, &rope.per_stream[VF])?;
    let mut kvs = Vec::with_capacity(3);
    for s in CONTEXT {
        let c = p.context[s].as_ref().expect("context stream declared");
        let n = f.norm(xs[s], None)?;
        let n = f.modulate(n, cms[s][3], cms[s][4])?;
        kvs.push(f.linear(n, &c.kv)?);
    }
    let kv = f.tape.concat(&kvs, 1)?;
    let (k, v) = f.split2(kv)?;
    let k = f.rope(k, &rope.context)?;
    let a = f.tape.attention(q, k, v, cfg.heads)?;
    let o = f.linear(a, &p.target.cross_out)?;
    xs[VF] = f.gated_residual(xs[VF], o, tm[5])?;

    let n = f.norm(xs[VF], None)?;
    let n = f.modulate(n, tm[6], tm[7])?;
    let y = f.mlp(n, &p.target.mlp)?;
    xs[VF] = f.gated_residual(xs[VF], y, tm[8])?;
    f.tape.concat(&xs, 1)
}
