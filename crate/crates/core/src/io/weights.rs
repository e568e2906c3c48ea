//! The ESRW weights blob.
//!
//! ```text
//! "ESRW"  version:u32  count:u32
//! count × { name_len:u32  name:utf8  rank:u32  dims:u32×rank  data:f32×Πdims }
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ESRW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl PartialEq for NamedTensor {
    /// Bitwise, so NaN payloads compare equal to themselves.
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Tensors keyed by name, written in name order.
pub type WeightMap = BTreeMap<String, NamedTensor>;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(weights: &WeightMap) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, weights.len())?;
    for (name, t) in weights {
        let expected: usize = t.dims.iter().product();
        if expected != t.data.len() {
            return Err(Error::Format(format!(
                "tensor {name:?}: dims {:?} hold {expected} values, got {}",
                t.dims,
                t.data.len()
            )));
        }
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.dims.len())?;
        for &d in &t.dims {
            put_u32(&mut out, d)?;
        }
        out.reserve(4 * t.data.len());
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("weights blob truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(buf: &[u8]) -> Result<WeightMap> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Format("weights blob does not start with ESRW".into()));
    }
    let version = cur.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    let count = cur.u32("tensor count")?;
    let mut map = WeightMap::new();
    for _ in 0..count {
        let len = cur.u32("name length")?;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = cur.u32("rank")?;
        let dims = (0..rank).map(|_| cur.u32("dims")).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name:?}: dims overflow")))?;
        let bytes = cur.take(
            n.checked_mul(4).ok_or_else(|| Error::Format(format!("tensor {name:?}: size overflow")))?,
            "payload",
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if map.insert(name.clone(), NamedTensor { dims, data }).is_some() {
            return Err(Error::Format(format!("tensor {name:?} appears twice")));
        }
    }
    if cur.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after last tensor", buf.len() - cur.pos)));
    }
    Ok(map)
}
