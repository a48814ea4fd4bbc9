//! Binary checkpoint format.
//!
//! ```text
//! magic "HXCKPT\0\0" | version u32 | meta_len u64 | meta (JSON, UTF-8)
//! count u32 | count x (name_len u32, name, rows u64, cols u64)
//! raw values: every tensor in table order, little-endian f64
//! ```

use std::fs;
use std::path::Path;

use serde_json::Value;
use thiserror::Error;

use super::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"HXCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub fn encode(store: &ParamStore, meta: &Value) -> Vec<u8> {
    let meta = serde_json::to_vec(meta).expect("JSON values always serialize");
    let mut out = Vec::with_capacity(64 + meta.len() + store.total_size() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    }
    for (_, _, t) in store.iter() {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Malformed("size overflows usize".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, Value), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let meta_len = r.usize()?;
    let meta: Value =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| CheckpointError::Malformed(format!("meta: {e}")))?;
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?
            .to_string();
        table.push((name, r.usize()?, r.usize()?));
    }
    let mut store = ParamStore::new();
    for (name, rows, cols) in table {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| CheckpointError::Malformed(format!("shape of `{name}` overflows")))?;
        let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(bytes.len()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if store.id(&name).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate parameter `{name}`")));
        }
        store.add(name, Tensor::from_vec(rows, cols, data));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((store, meta))
}

pub fn save(path: &Path, store: &ParamStore, meta: &Value) -> Result<(), CheckpointError> {
    fs::write(path, encode(store, meta))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, Value), CheckpointError> {
    decode(&fs::read(path)?)
}
