//! Binary named-tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VFZ1" | version u32 | count u32 | count × (name_len u32 | name | rank u32 | rank × u64 | f64 payload)
//! ```
//!
//! There is no checksum: a corrupted payload byte loads as a changed value.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VFZ1";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        if name.is_empty() || !seen.insert(name.as_str()) {
            return Err(Error::Usage(format!("checkpoint tensor name `{name}` is empty or repeated")));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                detail: format!("truncated {field}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse { offset: 0, detail: "bad magic, expected \"VFZ1\"".into() });
    }
    let at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse { offset: at, detail: format!("unsupported version {version}") });
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Parse { offset: at, detail: format!("name of tensor {i} is not UTF-8") })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let at = r.pos;
            let e = r.u64("extent")?;
            if e == 0 || e > (bytes.len() as u64) {
                return Err(Error::Parse { offset: at, detail: format!("extent {e} of `{name}` is invalid") });
            }
            shape.push(e as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .filter(|&n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::Parse { offset: r.pos, detail: format!("shape of `{name}` overflows") })?;
        let payload = r.take(n * 8, "payload")?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse { offset: r.pos, detail: "trailing bytes after last tensor".into() });
    }
    Ok(out)
}

pub fn save_checkpoint(tensors: &[(String, Tensor)], path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(tensors)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a checkpoint; a nonexistent file is [`Error::MissingCheckpoint`].
pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingCheckpoint(path.to_path_buf())),
        Err(e) => return Err(e.into()),
    };
    Ok(decode_checkpoint(&bytes)?.into_iter().collect())
}
