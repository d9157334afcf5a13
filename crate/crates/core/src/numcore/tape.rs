//! Reverse-mode differentiation tape.
//!
//! Every kernel computes its value eagerly, checks it for non-finite entries
//! and records enough state to run its vector-Jacobian product later.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{HwmError, Result};
use crate::numcore::params::{ParamGrads, ParamId, ParamStore};
use crate::numcore::tensor::{ensure_finite, split_axis, Tensor};
use crate::scalar::{gemm, MatView, Scalar};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    BroadcastMid { x: Var, y: Var, mul: bool },
    Matmul(Var, Var),
    Gelu(Var),
    Silu(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    ExpandAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Option<Var>, bias: Option<Var>, axis: usize, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Rope { x: Var, cos: Arc<Vec<T>>, sin: Arc<Vec<T>> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    MaskedCe { logits: Var, probs: Vec<T>, targets: Vec<usize>, mask: Vec<bool>, count: usize },
    Mse(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    WhereLeading { a: Var, b: Var, choose: Vec<bool> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records kernels applied to tensors and differentiates scalar outputs.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    bytes: usize,
    peak_bytes: usize,
}

/// Gradients of one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: ParamGrads<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    pub fn params(&self) -> &ParamGrads<T> {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads<T> {
        self.params
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), bytes: 0, peak_bytes: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Bytes of activations (values plus saved backward state) currently held.
    pub fn activation_bytes(&self) -> usize {
        self.bytes
    }

    pub fn peak_activation_bytes(&self) -> usize {
        self.peak_bytes
    }

    fn push(&mut self, kernel: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        ensure_finite(kernel, value.data())?;
        let saved = match &op {
            Op::LayerNorm { xhat, rstd, .. } => xhat.len() + rstd.len(),
            Op::Attention { probs, .. } | Op::MaskedCe { probs, .. } => probs.len(),
            _ => 0,
        };
        if !matches!(op, Op::Param(_)) {
            self.bytes += (value.numel() + saved) * std::mem::size_of::<T>();
            self.peak_bytes = self.peak_bytes.max(self.bytes);
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant or differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Parameter input. Repeated calls for the same storage return the same
    /// node, so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push("param", store.get(id).clone(), Op::Param(id), true)?;
        self.params.insert(id, v);
        Ok(v)
    }

    fn suffix_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(HwmError::dim(op, format!("{sa:?} does not broadcast with {sb:?}")));
        }
        Ok(())
    }

    fn binary(&mut self, kernel: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        self.suffix_check(kernel, a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len());
        for chunk in va.chunks(vb.len().max(1)) {
            out.extend(chunk.iter().zip(vb).map(|(&x, &y)| f(x, y)));
        }
        Ok(out)
    }

    /// `a + b`, where `b`'s shape is a suffix of `a`'s (broadcast over leading extents).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(a) || self.ng(b);
        self.push("add", value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(a) || self.ng(b);
        self.push("sub", value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(a) || self.ng(b);
        self.push("mul", value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push("scale", value, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        let ng = self.ng(x);
        self.push("add_scalar", value, Op::AddScalar(x), ng)
    }

    fn mid_dims(&self, op: &'static str, x: Var, y: Var) -> Result<(usize, usize, usize)> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sx.len() < 2 || sy.len() != 2 || sx[0] != sy[0] || sx[sx.len() - 1] != sy[1] {
            return Err(HwmError::dim(op, format!("expected [B, .., h] with [B, h], got {sx:?} and {sy:?}")));
        }
        let b = sx[0];
        let h = sy[1];
        Ok((b, self.value(x).numel() / (b * h), h))
    }

    fn broadcast_mid(&mut self, x: Var, y: Var, mul: bool) -> Result<Var> {
        let kernel = if mul { "mul_rows" } else { "add_rows" };
        let (b, m, h) = self.mid_dims(kernel, x, y)?;
        let (vx, vy) = (self.value(x).data(), self.value(y).data());
        let mut out = vec![T::zero(); vx.len()];
        for bi in 0..b {
            let yrow = &vy[bi * h..(bi + 1) * h];
            for mi in 0..m {
                let off = (bi * m + mi) * h;
                for j in 0..h {
                    out[off + j] = if mul { vx[off + j] * yrow[j] } else { vx[off + j] + yrow[j] };
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(x) || self.ng(y);
        self.push(kernel, value, Op::BroadcastMid { x, y, mul }, ng)
    }

    /// `x [B, .., h] * y [B, h]`, broadcasting `y` over the middle extents.
    pub fn mul_rows(&mut self, x: Var, y: Var) -> Result<Var> {
        self.broadcast_mid(x, y, true)
    }

    /// `x [B, .., h] + y [B, h]`, broadcasting `y` over the middle extents.
    pub fn add_rows(&mut self, x: Var, y: Var) -> Result<Var> {
        self.broadcast_mid(x, y, false)
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`; leading extents broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let mut out = vec![T::zero(); plan.out_shape.iter().product()];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            plan.for_each(|ai, bi, oi| {
                gemm(
                    T::one(),
                    va,
                    MatView::dense(ai * plan.m * plan.k, plan.m, plan.k),
                    vb,
                    MatView::dense(bi * plan.k * plan.n, plan.k, plan.n),
                    T::zero(),
                    &mut out,
                    MatView::dense(oi * plan.m * plan.n, plan.m, plan.n),
                );
            });
        }
        let value = Tensor::new(plan.out_shape.clone(), out)?;
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", value, Op::Matmul(a, b), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| gelu_fwd(v));
        let ng = self.ng(x);
        self.push("gelu", value, Op::Gelu(x), ng)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        let ng = self.ng(x);
        self.push("silu", value, Op::Silu(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let ng = self.ng(x);
        self.push("reshape", value, Op::Reshape(x), ng)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(HwmError::dim("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let (out_shape, out) = permute_data(self.value(x).data(), &shape, perm);
        let value = Tensor::new(out_shape, out)?;
        let ng = self.ng(x);
        self.push("permute", value, Op::Permute(x, perm.to_vec()), ng)
    }

    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(HwmError::dim("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| HwmError::dim("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(HwmError::dim("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || (0..s.len()).any(|d| d != axis && s[d] != first[d]) {
                return Err(HwmError::dim("concat", format!("{s:?} vs {first:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x)[axis];
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push("concat", value, Op::Concat(xs.to_vec(), axis), ng)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(HwmError::dim("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let value = Tensor::new(oshape, out)?;
        let ng = self.ng(x);
        self.push("slice", value, Op::Slice { x, axis, start }, ng)
    }

    /// Inserts a new axis of extent `n` at `axis`, repeating the input.
    pub fn expand_axis(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() {
            return Err(HwmError::dim("expand_axis", format!("axis {axis} for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&d[o * inner..(o + 1) * inner]);
            }
        }
        let mut oshape = shape;
        oshape.insert(axis, n);
        let value = Tensor::new(oshape, out)?;
        let ng = self.ng(x);
        self.push("expand_axis", value, Op::ExpandAxis { x, axis }, ng)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(HwmError::dim("mean_axis", format!("axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let inv = T::one() / T::of(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut oshape = shape;
        oshape.remove(axis);
        let value = Tensor::new(oshape, out)?;
        let ng = self.ng(x);
        self.push("mean_axis", value, Op::MeanAxis { x, axis }, ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(HwmError::dim("softmax", format!("axis {axis} for {shape:?}")));
        }
        let mut out = self.value(x).data().to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        for o in 0..outer {
            for i in 0..inner {
                softmax_strided(&mut out, o * n * inner + i, n, inner);
            }
        }
        let value = Tensor::new(shape, out)?;
        let ng = self.ng(x);
        self.push("softmax", value, Op::Softmax { x, axis }, ng)
    }

    /// Standardizes slices along `axis` (eps 1e-5) then applies optional gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(HwmError::dim("layer_norm", format!("axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [n] {
                return Err(HwmError::dim("layer_norm", format!("affine {:?} vs extent {n}", self.shape(p))));
            }
        }
        let d = self.value(x).data();
        let eps = T::of(LAYER_NORM_EPS);
        let nf = T::of(n as f64);
        let mut xhat = vec![T::zero(); d.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mean = (0..n).map(|j| d[base + j * inner]).sum::<T>() / nf;
                let var = (0..n).map(|j| (d[base + j * inner] - mean).powi(2)).sum::<T>() / nf;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for j in 0..n {
                    xhat[base + j * inner] = (d[base + j * inner] - mean) * r;
                }
            }
        }
        let mut out = xhat.clone();
        if gain.is_some() || bias.is_some() {
            let g = gain.map(|g| self.value(g).data().to_vec());
            let b = bias.map(|b| self.value(b).data().to_vec());
            for (idx, v) in out.iter_mut().enumerate() {
                let j = (idx / inner) % n;
                if let Some(g) = &g {
                    *v *= g[j];
                }
                if let Some(b) = &b {
                    *v += b[j];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let ng = self.ng(x) || gain.is_some_and(|g| self.ng(g)) || bias.is_some_and(|b| self.ng(b));
        self.push("layer_norm", value, Op::LayerNorm { x, gain, bias, axis, xhat, rstd }, ng)
    }

    /// Row lookup: `table [V, h]` at `ids` gives `[ids.len(), h]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(HwmError::dim("embedding", format!("table must be rank 2, got {shape:?}")));
        }
        let (v, h) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(HwmError::TokenOutOfRange { id: bad as u32, vocab: v });
        }
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            out.extend_from_slice(&d[i * h..(i + 1) * h]);
        }
        let value = Tensor::new(vec![ids.len(), h], out)?;
        let ng = self.ng(table);
        self.push("embedding", value, Op::Embedding { table, ids: ids.to_vec() }, ng)
    }

    /// Rotates interleaved pairs of every head of `x [.., n, heads * d]` by the
    /// angles whose cosines/sines are given as `[n, d / 2]` tables.
    pub fn rope(&mut self, x: Var, cos: Arc<Vec<T>>, sin: Arc<Vec<T>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, width) = rope_dims(&shape, cos.len(), sin.len())?;
        let half = cos.len() / n;
        let mut out = self.value(x).data().to_vec();
        rotate_pairs(&mut out, n, width, half, &cos, &sin, false);
        let value = Tensor::new(shape, out)?;
        let ng = self.ng(x);
        self.push("rope", value, Op::Rope { x, cos, sin }, ng)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q [.., nq, h]`, `k`/`v` `[.., nk, h]` with identical leading extents;
    /// heads split the last axis into `heads` contiguous chunks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let dims = AttnDims::new(self.shape(q), self.shape(k), self.shape(v), heads)?;
        let mut probs = vec![T::zero(); dims.lead * heads * dims.nq * dims.nk];
        let mut out = vec![T::zero(); dims.lead * dims.nq * dims.h];
        attention_forward(&dims, self.value(q).data(), self.value(k).data(), self.value(v).data(), &mut probs, &mut out);
        let value = Tensor::new(self.shape(q).to_vec(), out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push("attention", value, Op::Attention { q, k, v, heads, probs }, ng)
    }

    /// Mean negative log-likelihood over positions where `mask` is set.
    ///
    /// Returns the scalar loss; with no masked positions the loss is zero.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let classes = *shape.last().ok_or_else(|| HwmError::dim("masked_ce", "scalar logits"))?;
        let rows = self.value(logits).numel() / classes.max(1);
        if targets.len() != rows || mask.len() != rows {
            return Err(HwmError::dim(
                "masked_ce",
                format!("{rows} rows vs {} targets / {} mask entries", targets.len(), mask.len()),
            ));
        }
        if let Some(&bad) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&t| t >= classes) {
            return Err(HwmError::TokenOutOfRange { id: bad as u32, vocab: classes });
        }
        let mut probs = self.value(logits).data().to_vec();
        let count = mask.iter().filter(|&&m| m).count();
        let mut loss = T::zero();
        for r in 0..rows {
            softmax_strided(&mut probs, r * classes, classes, 1);
            if mask[r] {
                loss -= probs[r * classes + targets[r]].max(T::min_positive_value()).ln();
            }
        }
        if count > 0 {
            loss /= T::of(count as f64);
        }
        let ng = self.ng(logits);
        self.push(
            "masked_cross_entropy",
            Tensor::scalar(loss),
            Op::MaskedCe { logits, probs, targets: targets.to_vec(), mask: mask.to_vec(), count },
            ng,
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(HwmError::dim("mse", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n = T::of(va.len().max(1) as f64);
        let loss = va.iter().zip(vb).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        let ng = self.ng(a) || self.ng(b);
        self.push("mse", Tensor::scalar(loss), Op::Mse(a, b), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push("sum", Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::of(self.value(x).numel().max(1) as f64);
        let s = self.value(x).sum() / n;
        let ng = self.ng(x);
        self.push("mean", Tensor::scalar(s), Op::MeanAll(x), ng)
    }

    /// Per leading index `i`: `b` (broadcast if it lacks the leading axis) when
    /// `choose[i]`, else `a[i]`.
    pub fn where_leading(&mut self, choose: &[bool], a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || choose.len() != sa[0] || !(sb == sa || sb == sa[1..]) {
            return Err(HwmError::dim("where_leading", format!("{sa:?} vs {sb:?} with {} flags", choose.len())));
        }
        let inner: usize = sa[1..].iter().product();
        let bcast = sb.len() < sa.len();
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len());
        for (i, &c) in choose.iter().enumerate() {
            if c {
                let off = if bcast { 0 } else { i * inner };
                out.extend_from_slice(&vb[off..off + inner]);
            } else {
                out.extend_from_slice(&va[i * inner..(i + 1) * inner]);
            }
        }
        let value = Tensor::new(sa, out)?;
        let ng = self.ng(a) || self.ng(b);
        self.push("where_leading", value, Op::WhereLeading { a, b, choose: choose.to_vec() }, ng)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(HwmError::dim("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let slots = self.params.keys().map(|p| p.0 + 1).max().unwrap_or(0);
        let mut pgrads = ParamGrads::new(slots);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(idx, &g, &mut grads)?;
            if let Op::Param(id) = node.op {
                pgrads.accumulate(id, Tensor::new(node.value.shape().to_vec(), g.clone())?);
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { nodes: grads, shapes, params: pgrads })
    }

    fn backprop(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, gv: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.iter_mut().zip(gv).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(gv),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                acc(*a, g.to_vec());
                let n = self.value(*b).numel();
                let mut gb = vec![T::zero(); n];
                for chunk in g.chunks(n.max(1)) {
                    gb.iter_mut().zip(chunk).for_each(|(a, &x)| *a += x);
                }
                if neg {
                    gb.iter_mut().for_each(|x| *x = -*x);
                }
                acc(*b, gb);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let n = vb.len().max(1);
                let mut ga = Vec::with_capacity(g.len());
                let mut gb = vec![T::zero(); vb.len()];
                for (gc, ac) in g.chunks(n).zip(va.chunks(n)) {
                    ga.extend(gc.iter().zip(vb).map(|(&x, &y)| x * y));
                    gb.iter_mut().zip(gc.iter().zip(ac)).for_each(|(d, (&x, &y))| *d += x * y);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|&v| v * *c).collect()),
            Op::AddScalar(x) => acc(*x, g.to_vec()),
            Op::BroadcastMid { x, y, mul } => {
                let (b, m, h) = self.mid_dims("broadcast_mid", *x, *y)?;
                let (vx, vy) = (self.value(*x).data(), self.value(*y).data());
                let mut gx = vec![T::zero(); vx.len()];
                let mut gy = vec![T::zero(); vy.len()];
                for bi in 0..b {
                    for mi in 0..m {
                        let off = (bi * m + mi) * h;
                        for j in 0..h {
                            let gv = g[off + j];
                            if *mul {
                                gx[off + j] = gv * vy[bi * h + j];
                                gy[bi * h + j] += gv * vx[off + j];
                            } else {
                                gx[off + j] = gv;
                                gy[bi * h + j] += gv;
                            }
                        }
                    }
                }
                acc(*x, gx);
                acc(*y, gy);
            }
            Op::Matmul(a, b) => {
                let plan = MatmulPlan::new(self.shape(*a), self.shape(*b))?;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (m, k, n) = (plan.m, plan.k, plan.n);
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![T::zero(); va.len()];
                    plan.for_each(|ai, bi, oi| {
                        gemm(
                            T::one(),
                            g,
                            MatView::dense(oi * m * n, m, n),
                            vb,
                            MatView::dense(bi * k * n, k, n).t(),
                            T::one(),
                            &mut ga,
                            MatView::dense(ai * m * k, m, k),
                        );
                    });
                    acc(*a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![T::zero(); vb.len()];
                    plan.for_each(|ai, bi, oi| {
                        gemm(
                            T::one(),
                            va,
                            MatView::dense(ai * m * k, m, k).t(),
                            g,
                            MatView::dense(oi * m * n, m, n),
                            T::one(),
                            &mut gb,
                            MatView::dense(bi * k * n, k, n),
                        );
                    });
                    acc(*b, gb);
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                acc(*x, g.iter().zip(vx).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect());
            }
            Op::Silu(x) => {
                let vx = self.value(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(vx)
                        .map(|(&gv, &xv)| {
                            let s = T::one() / (T::one() + (-xv).exp());
                            gv * (s + xv * s * (T::one() - s))
                        })
                        .collect(),
                );
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, gx) = permute_data(g, node.value.shape(), &inv);
                acc(*x, gx);
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut start = 0;
                for &x in xs {
                    let n = self.shape(x)[*axis];
                    let mut gx = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let base = o * total * inner + start * inner;
                        gx.extend_from_slice(&g[base..base + n * inner]);
                    }
                    acc(x, gx);
                    start += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = split_axis(shape, *axis);
                let len = node.value.shape()[*axis];
                if self.nodes[x.0].needs_grad {
                    // Accumulate straight into the parent's slot; slices of one
                    // tensor usually arrive in sequence.
                    let gx = grads[x.0].get_or_insert_with(|| vec![T::zero(); outer * n * inner]);
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        let src = o * len * inner;
                        gx[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::ExpandAxis { x, axis } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis..].iter().product();
                let n = node.value.shape()[*axis];
                let mut gx = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        for i in 0..inner {
                            gx[o * inner + i] += g[base + i];
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::MeanAxis { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let inv = T::one() / T::of(n as f64);
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            gx[(o * n + j) * inner + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let dot = (0..n).map(|j| g[base + j * inner] * y[base + j * inner]).sum::<T>();
                        for j in 0..n {
                            let p = base + j * inner;
                            gx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::LayerNorm { x, gain, bias, axis, xhat, rstd } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let gvals = gain.map(|gv| self.value(gv).data().to_vec());
                let mut dgain = vec![T::zero(); n];
                let mut dbias = vec![T::zero(); n];
                let mut gx = vec![T::zero(); xhat.len()];
                let nf = T::of(n as f64);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..n {
                            let p = base + j * inner;
                            dgain[j] += g[p] * xhat[p];
                            dbias[j] += g[p];
                            let d = g[p] * gvals.as_ref().map_or(T::one(), |gv| gv[j]);
                            sum_d += d;
                            sum_dx += d * xhat[p];
                        }
                        let r = rstd[o * inner + i];
                        for j in 0..n {
                            let p = base + j * inner;
                            let d = g[p] * gvals.as_ref().map_or(T::one(), |gv| gv[j]);
                            gx[p] = r * (d - sum_d / nf - xhat[p] * sum_dx / nf);
                        }
                    }
                }
                acc(*x, gx);
                if let Some(gv) = gain {
                    acc(*gv, dgain);
                }
                if let Some(bv) = bias {
                    acc(*bv, dbias);
                }
            }
            Op::Embedding { table, ids } => {
                let shape = self.shape(*table);
                let h = shape[1];
                let mut gt = vec![T::zero(); shape[0] * h];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..h {
                        gt[i * h + j] += g[r * h + j];
                    }
                }
                acc(*table, gt);
            }
            Op::Rope { x, cos, sin } => {
                let shape = node.value.shape();
                let (n, width) = rope_dims(shape, cos.len(), sin.len())?;
                let mut gx = g.to_vec();
                rotate_pairs(&mut gx, n, width, cos.len() / n, cos, sin, true);
                acc(*x, gx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let dims = AttnDims::new(self.shape(*q), self.shape(*k), self.shape(*v), *heads)?;
                let (gq, gk, gv) = attention_backward(
                    &dims,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                );
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gv);
            }
            Op::MaskedCe { logits, probs, targets, mask, count } => {
                let classes = *self.shape(*logits).last().expect("logits rank");
                let mut gl = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let scale = g[0] / T::of(*count as f64);
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        for c in 0..classes {
                            gl[r * classes + c] = probs[r * classes + c] * scale;
                        }
                        gl[r * classes + t] -= scale;
                    }
                }
                acc(*logits, gl);
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let c = T::of(2.0) * g[0] / T::of(va.len().max(1) as f64);
                let ga: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| c * (x - y)).collect();
                acc(*b, ga.iter().map(|&x| -x).collect());
                acc(*a, ga);
            }
            Op::SumAll(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / T::of(n.max(1) as f64); n]);
            }
            Op::WhereLeading { a, b, choose } => {
                let inner = self.value(*a).numel() / choose.len().max(1);
                let bcast = self.value(*b).numel() != self.value(*a).numel();
                let mut ga = vec![T::zero(); self.value(*a).numel()];
                let mut gb = vec![T::zero(); self.value(*b).numel()];
                for (i, &c) in choose.iter().enumerate() {
                    let src = &g[i * inner..(i + 1) * inner];
                    if c {
                        let off = if bcast { 0 } else { i * inner };
                        gb[off..off + inner].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    } else {
                        ga[i * inner..(i + 1) * inner].copy_from_slice(src);
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
        }
        Ok(())
    }
}

/// `tanh` through one `exp`; saturates cleanly at both ends.
fn fast_tanh<T: Scalar>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + fast_tanh(u))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let u = c * (x + k * x * x * x);
    let t = fast_tanh(u);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

/// In-place max-subtracted softmax of `n` entries at `start`, `stride` apart.
pub(crate) fn softmax_strided<T: Scalar>(data: &mut [T], start: usize, n: usize, stride: usize) {
    let mut max = T::neg_infinity();
    for j in 0..n {
        max = max.max(data[start + j * stride]);
    }
    let mut sum = T::zero();
    for j in 0..n {
        let p = start + j * stride;
        data[p] = (data[p] - max).exp();
        sum += data[p];
    }
    for j in 0..n {
        data[start + j * stride] /= sum;
    }
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out_shape, out);
    }
    // Contiguous runs along the last output axis when it is also the last input axis.
    let inner_contig = rank > 0 && perm[rank - 1] == rank - 1;
    let mut idx = vec![0usize; rank];
    let last = rank.saturating_sub(1);
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        if rank == 0 {
            out.push(data[0]);
            break;
        }
        if inner_contig {
            out.extend_from_slice(&data[base..base + out_shape[last]]);
            idx[last] = out_shape[last];
        } else {
            out.push(data[base]);
            idx[last] += 1;
        }
        let mut d = last;
        while idx[d] >= out_shape[d] {
            idx[d] = 0;
            if d == 0 {
                return (out_shape, out);
            }
            d -= 1;
            idx[d] += 1;
        }
    }
    (out_shape, out)
}

fn rope_dims(shape: &[usize], cos_len: usize, sin_len: usize) -> Result<(usize, usize)> {
    if shape.len() < 2 || cos_len != sin_len {
        return Err(HwmError::dim("rope", format!("input {shape:?}, tables {cos_len}/{sin_len}")));
    }
    let n = shape[shape.len() - 2];
    let width = shape[shape.len() - 1];
    if n == 0 || cos_len % n != 0 {
        return Err(HwmError::dim("rope", format!("table of {cos_len} entries for {n} positions")));
    }
    let half = cos_len / n;
    if half == 0 || width % (2 * half) != 0 {
        return Err(HwmError::dim("rope", format!("width {width} is not a multiple of head dim {}", 2 * half)));
    }
    Ok((n, width))
}

fn rotate_pairs<T: Scalar>(data: &mut [T], n: usize, width: usize, half: usize, cos: &[T], sin: &[T], inverse: bool) {
    let head_dim = 2 * half;
    let heads = width / head_dim;
    let rows = data.len() / width;
    for r in 0..rows {
        let pos = r % n;
        let row = &mut data[r * width..(r + 1) * width];
        for h in 0..heads {
            for p in 0..half {
                let c = cos[pos * half + p];
                let s = if inverse { -sin[pos * half + p] } else { sin[pos * half + p] };
                let i0 = h * head_dim + 2 * p;
                let (x0, x1) = (row[i0], row[i0 + 1]);
                row[i0] = x0 * c - x1 * s;
                row[i0 + 1] = x0 * s + x1 * c;
            }
        }
    }
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    out_lead: Vec<usize>,
    a_lead: Vec<usize>,
    b_lead: Vec<usize>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(HwmError::dim("matmul", format!("operands must be at least rank 2: {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(HwmError::dim("matmul", format!("inner extents differ: {sa:?} x {sb:?}")));
        }
        let (la, lb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let rank = la.len().max(lb.len());
        let pad = |l: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - l.len()];
            v.extend_from_slice(l);
            v
        };
        let (pa, pb) = (pad(la), pad(lb));
        let mut out_lead = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(HwmError::dim("matmul", format!("batch extents do not broadcast: {sa:?} x {sb:?}")));
            }
            out_lead.push(x.max(y));
        }
        let mut out_shape = out_lead.clone();
        out_shape.extend_from_slice(&[m, n]);
        Ok(Self { m, k, n, out_shape, out_lead, a_lead: pa, b_lead: pb })
    }

    /// Calls `f(a_batch, b_batch, out_batch)` for every output batch entry.
    /// A rank-2 right operand collapses to one tall product.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let total: usize = self.out_lead.iter().product();
        let mut idx = vec![0usize; self.out_lead.len()];
        for o in 0..total {
            let mut rem = o;
            for d in (0..idx.len()).rev() {
                idx[d] = rem % self.out_lead[d];
                rem /= self.out_lead[d];
            }
            let flat = |lead: &[usize]| {
                let mut f = 0;
                for d in 0..lead.len() {
                    f = f * lead[d] + if lead[d] == 1 { 0 } else { idx[d] };
                }
                f
            };
            f(flat(&self.a_lead), flat(&self.b_lead), o);
        }
    }
}

struct AttnDims {
    lead: usize,
    nq: usize,
    nk: usize,
    h: usize,
    heads: usize,
    d: usize,
}

impl AttnDims {
    fn new(sq: &[usize], sk: &[usize], sv: &[usize], heads: usize) -> Result<Self> {
        if sq.len() < 2 || sk.len() != sq.len() || sv != sk {
            return Err(HwmError::dim("attention", format!("q {sq:?}, k {sk:?}, v {sv:?}")));
        }
        let r = sq.len();
        if sq[..r - 2] != sk[..r - 2] || sq[r - 1] != sk[r - 1] {
            return Err(HwmError::dim("attention", format!("q {sq:?} vs k {sk:?}")));
        }
        let h = sq[r - 1];
        if heads == 0 || h % heads != 0 {
            return Err(HwmError::dim("attention", format!("width {h} not divisible by {heads} heads")));
        }
        Ok(Self { lead: sq[..r - 2].iter().product(), nq: sq[r - 2], nk: sk[r - 2], h, heads, d: h / heads })
    }

    fn head_view(&self, b: usize, j: usize, n: usize) -> MatView {
        MatView { offset: b * n * self.h + j * self.d, rows: n, cols: self.d, row_stride: self.h, col_stride: 1 }
    }

    fn prob_view(&self, b: usize, j: usize) -> MatView {
        MatView::dense((b * self.heads + j) * self.nq * self.nk, self.nq, self.nk)
    }
}

fn attention_forward<T: Scalar>(dims: &AttnDims, q: &[T], k: &[T], v: &[T], probs: &mut [T], out: &mut [T]) {
    let scale = T::one() / T::of(dims.d as f64).sqrt();
    for b in 0..dims.lead {
        for j in 0..dims.heads {
            let pv = dims.prob_view(b, j);
            gemm(scale, q, dims.head_view(b, j, dims.nq), k, dims.head_view(b, j, dims.nk).t(), T::zero(), probs, pv);
            for r in 0..dims.nq {
                softmax_strided(probs, pv.offset + r * dims.nk, dims.nk, 1);
            }
            gemm(T::one(), probs, pv, v, dims.head_view(b, j, dims.nk), T::zero(), out, dims.head_view(b, j, dims.nq));
        }
    }
}

fn attention_backward<T: Scalar>(
    dims: &AttnDims,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let scale = T::one() / T::of(dims.d as f64).sqrt();
    let mut gq = vec![T::zero(); q.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); dims.nq * dims.nk];
    let local = MatView::dense(0, dims.nq, dims.nk);
    for b in 0..dims.lead {
        for j in 0..dims.heads {
            let pv = dims.prob_view(b, j);
            let qv = dims.head_view(b, j, dims.nq);
            let kv = dims.head_view(b, j, dims.nk);
            // dV = P^T dO
            gemm(T::one(), probs, pv.t(), g, qv, T::one(), &mut gv, kv);
            // dP = dO V^T
            gemm(T::one(), g, qv, v, kv.t(), T::zero(), &mut dp, local);
            // dS = P * (dP - rowsum(dP * P))
            for r in 0..dims.nq {
                let prow = &probs[pv.offset + r * dims.nk..pv.offset + (r + 1) * dims.nk];
                let drow = &mut dp[r * dims.nk..(r + 1) * dims.nk];
                let dot = prow.iter().zip(drow.iter()).map(|(&p, &d)| p * d).sum::<T>();
                for (d, &p) in drow.iter_mut().zip(prow) {
                    *d = p * (*d - dot);
                }
            }
            gemm(scale, &dp, local, k, kv, T::one(), &mut gq, qv);
            gemm(scale, &dp, local.t(), q, qv, T::one(), &mut gk, kv);
        }
    }
    (gq, gk, gv)
}

/// Attention weights `[.., heads, nq, nk]` for inspection, without recording.
pub fn attention_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let dims = AttnDims::new(q.shape(), k.shape(), k.shape(), heads)?;
    let mut probs = vec![T::zero(); dims.lead * heads * dims.nq * dims.nk];
    let mut out = vec![T::zero(); dims.lead * dims.nq * dims.h];
    attention_forward(&dims, q.data(), k.data(), k.data(), &mut probs, &mut out);
    let mut shape = q.shape()[..q.rank() - 2].to_vec();
    shape.extend_from_slice(&[heads, dims.nq, dims.nk]);
    Tensor::new(shape, probs)
}
