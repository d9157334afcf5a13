//! Checkpoint byte format, all integers little-endian:
//!
//! ```text
//! "HWMC"  version:u32  config_len:u32  config:utf8
//! step:u64  seed:u64  records:u32
//! per record: name_len:u32 name:utf8 kind:u8 ndim:u32 dims:u32*ndim payload:f32*numel
//! ```
//!
//! `kind` is 0 for a parameter, 1 for its first moment, 2 for its second.
//! Only storage slots are written; aliases are rebuilt from the config.
//! Random state is not stored: every stream is derived from `(seed, step)`.

use std::io::{Read, Write};
use std::path::Path;

use super::Moments;
use crate::error::{HwmError, Result};
use crate::numcore::{ParamLayout, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"HWMC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Effective run configuration as JSON text.
    pub config: String,
    pub step: u64,
    pub seed: u64,
    pub params: ParamStore<f32>,
    pub moments: Option<Moments<f32>>,
}

fn fmt_err(detail: impl Into<String>) -> HwmError {
    HwmError::Format { context: "checkpoint", detail: detail.into() }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let layout = self.params.layout();
        let kinds = if self.moments.is_some() { 3 } else { 1 };
        out.extend_from_slice(&((layout.num_storage() * kinds) as u32).to_le_bytes());
        for id in self.params.ids() {
            let name = &layout.spec(id).name;
            let mut tensors = vec![(0u8, self.params.get(id))];
            if let Some(m) = &self.moments {
                tensors.push((1, &m.m[id.index()]));
                tensors.push((2, &m.v[id.index()]));
            }
            for (kind, t) in tensors {
                out.extend_from_slice(&(name.len() as u32).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                out.push(kind);
                out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for &x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses a checkpoint against the layout the config describes. Every
    /// storage slot must be present with a matching shape.
    pub fn from_bytes(bytes: &[u8], layout: ParamLayout) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let n = c.u32()? as usize;
        let config = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| fmt_err("config is not UTF-8"))?;
        let step = c.u64()?;
        let seed = c.u64()?;
        let records = c.u32()? as usize;
        let mut params = ParamStore::zeros(layout);
        let slots = params.layout().num_storage();
        let mut seen = vec![[false; 3]; slots];
        let mut moments = Moments::zeros(&params);
        moments.step = step;
        for _ in 0..records {
            let n = c.u32()? as usize;
            let name = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| fmt_err("name is not UTF-8"))?;
            let kind = c.take(1)?[0];
            let ndim = c.u32()? as usize;
            let shape = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = c.take(numel * 4)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            let id = params.id(&name).map_err(|_| fmt_err(format!("unknown parameter `{name}`")))?;
            if params.layout().spec(id).name != name {
                return Err(fmt_err(format!("`{name}` is an alias, not a storage slot")));
            }
            if params.layout().spec(id).shape != shape {
                return Err(fmt_err(format!("shape mismatch for `{name}`")));
            }
            let t = Tensor::new(shape, data)?;
            match kind {
                0 => params.set(id, t)?,
                1 => moments.m[id.index()] = t,
                2 => moments.v[id.index()] = t,
                k => return Err(fmt_err(format!("unknown record kind {k}"))),
            }
            seen[id.index()][kind as usize] = true;
        }
        if c.pos != bytes.len() {
            return Err(fmt_err("trailing bytes"));
        }
        if let Some(i) = seen.iter().position(|s| !s[0]) {
            return Err(fmt_err(format!("missing parameter `{}`", params.layout().specs()[i].name)));
        }
        let has_moments = seen.iter().all(|s| s[1] && s[2]);
        if !has_moments && seen.iter().any(|s| s[1] || s[2]) {
            return Err(fmt_err("optimizer moments are incomplete"));
        }
        Ok(Self { config, step, seed, params, moments: has_moments.then_some(moments) })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| HwmError::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| HwmError::io(&tmp, e))?;
        f.sync_all().map_err(|e| HwmError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| HwmError::io(path, e))
    }

    pub fn load(path: &Path, layout: ParamLayout) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| HwmError::io(path, e))?;
        Self::from_bytes(&bytes, layout)
    }

    /// Reads only the header: version, config text, step and seed.
    pub fn peek_config(path: &Path) -> Result<(String, u64, u64)> {
        let bytes = std::fs::read(path).map_err(|e| HwmError::io(path, e))?;
        let mut c = Cursor { bytes: &bytes, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        c.u32()?;
        let n = c.u32()? as usize;
        let config = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| fmt_err("config is not UTF-8"))?;
        Ok((config, c.u64()?, c.u64()?))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| fmt_err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
