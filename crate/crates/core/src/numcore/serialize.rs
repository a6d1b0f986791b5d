//! Flat binary tensor files.
//!
//! Layout: the 8-byte magic `ADDLAB01`, then records until end of file:
//! `u64` name length, UTF-8 name bytes, `u64` rank, `rank` x `u64` dims,
//! then `product(dims)` x `f64` values. All integers and floats little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ADDLAB01";

pub type NamedTensors = Vec<(String, Tensor)>;

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.context, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8], context: &str) -> Result<NamedTensors> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(context, "missing ADDLAB01 magic"));
    }
    let mut cur = Cursor {
        bytes,
        pos: MAGIC.len(),
        context,
    };
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u64()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::format(context, format!("tensor name: {e}")))?
            .to_string();
        let rank = cur.u64()? as usize;
        if rank > 8 {
            return Err(Error::format(context, format!("tensor {name}: rank {rank}")));
        }
        let dims: Vec<usize> = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(context, format!("tensor {name}: dims overflow")))?;
        let raw = cur.take(count.checked_mul(8).ok_or_else(|| Error::format(context, "size overflow"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

pub fn write_to(mut w: impl Write, tensors: &[(String, Tensor)]) -> std::io::Result<()> {
    w.write_all(&encode(tensors))
}

pub fn read_from(mut r: impl Read, context: &str) -> Result<NamedTensors> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::format(context, e.to_string()))?;
    decode(&bytes, context)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<NamedTensors> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
