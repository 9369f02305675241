//! Parameter checkpoint files.
//!
//! Layout (all integers little-endian): magic `TACO`, `u32` format version,
//! then named blocks until end of file, each
//! `u32 name_len | name bytes | u32 rank | u32 dims[rank] | f64 payload`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{NumError, Tensor};

pub const MAGIC: &[u8; 4] = b"TACO";
pub const VERSION: u32 = 1;

pub fn encode(blocks: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], NumError> {
        if self.pos + n > self.buf.len() {
            return Err(NumError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NumError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, NumError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NumError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NumError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut blocks = Vec::new();
    while r.pos < bytes.len() {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| NumError::Checkpoint("parameter name is not utf-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let payload = r.take(count * 8)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        blocks.push((name, Tensor::new(shape, data)?));
    }
    Ok(blocks)
}

/// Write atomically: temp file in the same directory, then rename.
pub fn save(path: &Path, blocks: &[(String, Tensor)]) -> Result<(), NumError> {
    let bytes = encode(blocks);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| NumError::Io(format!("{}: {e}", tmp.display())))?;
    f.write_all(&bytes).map_err(|e| NumError::Io(format!("{}: {e}", tmp.display())))?;
    f.sync_all().ok();
    fs::rename(&tmp, path).map_err(|e| NumError::Io(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<HashMap<String, Tensor>, NumError> {
    let bytes = fs::read(path).map_err(|e| NumError::Io(format!("{}: {e}", path.display())))?;
    let blocks = decode(&bytes).map_err(|e| NumError::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(blocks.into_iter().collect())
}
