use crate::error::Result;
use crate::numcore::{ParamId, ParamLayout, ParamStore, Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Declaration helper. Every method takes the parameter's own path and,
/// when the parameter is shared, the canonical path it aliases.
pub struct Decl<'a> {
    pub layout: &'a mut ParamLayout,
}

impl<'a> Decl<'a> {
    pub fn new(layout: &'a mut ParamLayout) -> Self {
        Self { layout }
    }

    pub fn tensor(&mut self, name: &str, alias: Option<&str>, shape: &[usize], decay: bool) -> ParamId {
        match alias {
            Some(canon) => {
                let id = self
                    .layout
                    .resolve(canon)
                    .unwrap_or_else(|| panic!("alias `{name}` points at undeclared `{canon}`"));
                assert_eq!(self.layout.spec(id).shape, shape, "alias `{name}` has a different shape");
                self.layout.alias(name, id)
            }
            None => self.layout.declare(name, shape, decay),
        }
    }

    fn linear_with(&mut self, name: &str, alias: Option<&str>, i: usize, o: usize, decay: bool) -> Linear {
        let sub = |p: &str, part: &str| format!("{p}.{part}");
        let weight = self.tensor(&sub(name, "weight"), alias.map(|a| sub(a, "weight")).as_deref(), &[i, o], decay);
        let bias = self.tensor(&sub(name, "bias"), alias.map(|a| sub(a, "bias")).as_deref(), &[o], false);
        Linear { weight, bias: Some(bias) }
    }

    pub fn linear(&mut self, name: &str, alias: Option<&str>, i: usize, o: usize) -> Linear {
        self.linear_with(name, alias, i, o, true)
    }

    /// Modulation maps are excluded from weight decay.
    pub fn modulation(&mut self, name: &str, alias: Option<&str>, i: usize, o: usize) -> Linear {
        self.linear_with(name, alias, i, o, false)
    }

    pub fn norm(&mut self, name: &str, alias: Option<&str>, n: usize) -> Norm {
        let sub = |p: &str, part: &str| format!("{p}.{part}");
        let gain = self.tensor(&sub(name, "weight"), alias.map(|a| sub(a, "weight")).as_deref(), &[n], false);
        let bias = self.tensor(&sub(name, "bias"), alias.map(|a| sub(a, "bias")).as_deref(), &[n], false);
        Norm { gain, bias }
    }

    /// Unshared two-layer MLP `i -> hidden -> o`.
    pub fn mlp_io(&mut self, name: &str, i: usize, hidden: usize, o: usize) -> Mlp {
        Mlp {
            fc1: self.linear(&format!("{name}.fc1"), None, i, hidden),
            fc2: self.linear(&format!("{name}.fc2"), None, hidden, o),
        }
    }

    pub fn mlp(&mut self, name: &str, alias: Option<&str>, h: usize, hidden: usize) -> Mlp {
        let sub = |p: &str, part: &str| format!("{p}.{part}");
        Mlp {
            fc1: self.linear(&sub(name, "fc1"), alias.map(|a| sub(a, "fc1")).as_deref(), h, hidden),
            fc2: self.linear(&sub(name, "fc2"), alias.map(|a| sub(a, "fc2")).as_deref(), hidden, h),
        }
    }
}

/// Path of a per-stream block parameter, plus the canonical path when the
/// stream does not own it.
pub(crate) fn stream_paths(layer: usize, stream: usize, canon: usize, part: &str) -> (String, Option<String>) {
    let names = super::STREAM_NAMES;
    let own = format!("blocks.{layer}.{}.{part}", names[stream]);
    let alias = (canon != stream).then(|| format!("blocks.{layer}.{}.{part}", names[canon]));
    (own, alias)
}

/// Forward context: a tape plus the parameters it reads.
pub struct Fwd<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
}

impl<'a, T: Scalar> Fwd<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>) -> Self {
        Self { tape, store }
    }

    pub fn p(&mut self, id: ParamId) -> Result<Var> {
        self.tape.param(self.store, id)
    }

    /// `x [.., i] @ W [i, o] + b`, flattened to a single matrix product.
    pub fn linear(&mut self, x: Var, l: &Linear) -> Result<Var> {
        let shape = self.tape.shape(x).to_vec();
        let i = *shape.last().expect("linear input has rank >= 1");
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let w = self.p(l.weight)?;
        let o = self.tape.shape(w)[1];
        let flat = if shape.len() == 2 { x } else { self.tape.reshape(x, &[rows, i])? };
        let mut y = self.tape.matmul(flat, w)?;
        if let Some(b) = l.bias {
            let b = self.p(b)?;
            y = self.tape.add(y, b)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out = shape;
        *out.last_mut().expect("non-empty") = o;
        self.tape.reshape(y, &out)
    }

    pub fn norm(&mut self, x: Var, n: Option<&Norm>) -> Result<Var> {
        let axis = self.tape.shape(x).len() - 1;
        match n {
            Some(n) => {
                let g = self.p(n.gain)?;
                let b = self.p(n.bias)?;
                self.tape.layer_norm(x, Some(g), Some(b), axis)
            }
            None => self.tape.layer_norm(x, None, None, axis),
        }
    }

    pub fn mlp(&mut self, x: Var, m: &Mlp) -> Result<Var> {
        let h = self.linear(x, &m.fc1)?;
        let h = self.tape.gelu(h)?;
        self.linear(h, &m.fc2)
    }

    /// `x * (1 + scale) + shift` with `scale`, `shift` of shape `[B, h]`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let s = self.tape.add_scalar(scale, T::one())?;
        let y = self.tape.mul_rows(x, s)?;
        self.tape.add_rows(y, shift)
    }

    /// `x + gate * y`, gate `[B, h]`.
    pub fn gated_residual(&mut self, x: Var, y: Var, gate: Var) -> Result<Var> {
        let g = self.tape.mul_rows(y, gate)?;
        self.tape.add(x, g)
    }

    /// Splits `m [B, k*h]` into `k` chunks of width `h`.
    pub fn chunks(&mut self, m: Var, k: usize) -> Result<Vec<Var>> {
        let w = self.tape.shape(m)[1] / k;
        (0..k).map(|i| self.tape.slice(m, 1, i * w, w)).collect()
    }

    /// Splits `qkv [.., 3h]` into q, k, v.
    pub fn split3(&mut self, qkv: Var) -> Result<(Var, Var, Var)> {
        let shape = self.tape.shape(qkv);
        let axis = shape.len() - 1;
        let h = shape[axis] / 3;
        Ok((self.tape.slice(qkv, axis, 0, h)?, self.tape.slice(qkv, axis, h, h)?, self.tape.slice(qkv, axis, 2 * h, h)?))
    }

    pub fn split2(&mut self, kv: Var) -> Result<(Var, Var)> {
        let shape = self.tape.shape(kv);
        let axis = shape.len() - 1;
        let h = shape[axis] / 2;
        Ok((self.tape.slice(kv, axis, 0, h)?, self.tape.slice(kv, axis, h, h)?))
    }

    pub fn rope(&mut self, x: Var, t: &crate::rope::RopeTables<T>) -> Result<Var> {
        self.tape.rope(x, t.cos.clone(), t.sin.clone())
    }
}
