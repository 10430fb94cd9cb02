//! Checkpoint container, all integers little-endian:
//!
//! ```text
//! b"APCK"  u32 version
//! u32 n    n bytes of ModelConfig as `key=value` lines
//! u32 count
//! count x { u32 name_len, name (UTF-8), u32 rank, rank x u32 dim, f32 values }
//! ```
//!
//! Tensors are written in name order.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::nn::{ParamStore, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"APCK";
const VERSION: u32 = 1;

pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config.to_kv();
    put(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());
    let mut order: Vec<usize> = (0..model.params.len()).collect();
    order.sort_by(|a, b| model.params.name(*a).cmp(model.params.name(*b)));
    put(&mut out, order.len());
    for id in order {
        let name = model.params.name(id);
        let t = model.params.value(id);
        put(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put(&mut out, t.shape.len());
        for &d in &t.shape {
            put(&mut out, d);
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            what: "checkpoint",
            reason: format!("truncated at byte {}", self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format { what: "checkpoint", reason: "invalid UTF-8".into() })
    }
}

/// Decodes a checkpoint; the result keeps the file's tensor order.
pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let bad = |reason: String| Error::Format { what: "checkpoint", reason };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(bad(format!("unsupported version {version}")));
    }
    let config = ModelConfig::from_kv(&r.str()?)?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.str()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large".into()))?)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        if params.id(&name).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
        params.add(&name, Tensor::new(&shape, data));
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let model = Model { config, params };
    let reference = Model::<f32>::new(model.config.clone(), 0)?;
    reference.check_compatible(&model)?;
    model.reorder_like(&reference)
}

impl Model<f32> {
    /// Names of parameters missing from, extra in, or shaped differently
    /// in `other`.
    pub fn mismatched_params(&self, other: &Model<f32>) -> Vec<String> {
        let mut bad = Vec::new();
        for (id, name) in self.params.names().iter().enumerate() {
            match other.params.id(name) {
                Some(o) if other.params.value(o).shape == self.params.value(id).shape => {}
                _ => bad.push(name.clone()),
            }
        }
        for name in other.params.names() {
            if self.params.id(name).is_none() {
                bad.push(name.clone());
            }
        }
        bad
    }

    pub fn check_compatible(&self, other: &Model<f32>) -> Result<()> {
        let bad = self.mismatched_params(other);
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::IncompatibleCheckpoint(bad))
        }
    }

    fn reorder_like(self, reference: &Model<f32>) -> Result<Model<f32>> {
        let mut params = ParamStore::new();
        for name in reference.params.names() {
            let id = self.params.id(name).expect("checked compatible");
            params.add(name, self.params.value(id).clone());
        }
        Ok(Model { config: self.config, params })
    }
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
