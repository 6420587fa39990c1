//! Named-tensor container.
//!
//! Byte layout, all integers little-endian `u32`:
//!
//! ```text
//! magic  b"AUNETCK1"
//! count
//! count × { name_len, name (utf-8), ndim, dims[ndim], data[Π dims] as f32 LE }
//! ```
//!
//! Tensors are written in model registration order, so a partition's bytes
//! can be compared across files directly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Partition, Tensor};

const MAGIC: &[u8; 8] = b"AUNETCK1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot of a parameter store, rounded to `f32`.
    pub fn from_params(ps: &ParamStore) -> Self {
        let entries = ps
            .iter()
            .map(|(n, t)| {
                let data = t.data.iter().map(|&v| v as f32 as f64).collect();
                (n.to_string(), Tensor { shape: t.shape.clone(), data })
            })
            .collect();
        Checkpoint { entries }
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, self.entries.len());
        for (name, t) in &self.entries {
            out.extend(encode_tensor(name, t));
        }
        out
    }

    /// Serialized bytes of every tensor in one partition, in file order.
    pub fn partition_bytes(&self, part: Partition) -> Vec<u8> {
        self.entries
            .iter()
            .filter(|(n, _)| Partition::of_name(n) == Some(part))
            .flat_map(|(n, t)| encode_tensor(n, t))
            .collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
                .to_string();
            if Partition::of_name(&name).is_none() {
                return Err(Error::Checkpoint(format!("tensor {name} has no known partition")));
            }
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            entries.push((name, Tensor { shape, data }));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend(u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn encode_tensor(name: &str, t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(name.len() + 8 + 4 * (t.shape.len() + t.data.len()));
    put_u32(&mut out, name.len());
    out.extend(name.as_bytes());
    put_u32(&mut out, t.shape.len());
    for &d in &t.shape {
        put_u32(&mut out, d);
    }
    for &v in &t.data {
        out.extend((v as f32).to_le_bytes());
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
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    #[test]
    fn round_trip_is_exact_after_rounding() {
        let mut ps = ParamStore::new();
        ps.register("backbone.a", &[2, 3], Init::FanIn(3), 1);
        ps.register("fcn.b", &[4], Init::FanIn(4), 2);
        let ck = Checkpoint::from_params(&ps);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(ck, back);
        assert_eq!(back.to_bytes(), ck.to_bytes());
        assert!(!ck.partition_bytes(Partition::Fcn).is_empty());
        assert!(ck.partition_bytes(Partition::Gcn).is_empty());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut ps = ParamStore::new();
        ps.register("fcn.b", &[4], Init::Zeros, 2);
        let mut b = Checkpoint::from_params(&ps).to_bytes();
        b.pop();
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Checkpoint(_))));
    }
}
