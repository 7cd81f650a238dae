//! Weight files and JSON sidecars.
//!
//! Layout: `SDW1`, tensor count (u32), then per tensor the name length
//! (u32), UTF-8 name, rank (u32), dims (u64 each) and f32 little-endian data.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"SDW1";

pub fn encode_weights<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend((store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        out.extend(t.to_le_f32_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("weight file truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_weights<T: Real>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a weight file".into()));
    }
    let n = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let count = crate::tensor::numel(&shape);
        let data = c
            .take(count * 4)?
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        store.add(name, Tensor::from_vec(shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(store)
}

pub fn save_weights<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_weights(store)).map_err(|e| Error::io(path, e))
}

pub fn load_weights<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    decode_weights(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

pub fn load_json<S: DeserializeOwned>(path: &Path) -> Result<S> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}
