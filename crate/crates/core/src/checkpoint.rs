//! Self-describing parameter file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SCD1"  u32 version (=1)  u32 tensor count
//! per tensor: u32 name length, UTF-8 name, 4 x u32 dims (n, c, h, w), n*c*h*w x f64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Result, ScdError};
use crate::model::Params;
use crate::tensor::Tensor4;

pub const MAGIC: &[u8; 4] = b"SCD1";
pub const VERSION: u32 = 1;

pub fn encode(params: &Params) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + params.count_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ScdError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Params> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(ScdError::Format("bad magic, not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ScdError::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut params = Params::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| ScdError::Format("non-UTF-8 tensor name".into()))?.to_string();
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32()? as usize;
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| ScdError::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor4::new(shape, data).map_err(|e| ScdError::Format(format!("tensor '{name}': {e}")))?;
        if params.get(&name).is_some() {
            return Err(ScdError::Format(format!("duplicate tensor '{name}'")));
        }
        params.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(ScdError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(params)
}

pub fn save(params: &Params, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| ScdError::io(path, e))
}

pub fn load(path: &Path) -> Result<Params> {
    let bytes = fs::read(path).map_err(|e| ScdError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        ScdError::Format(m) => ScdError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
