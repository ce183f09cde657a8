//! IRNF checkpoints: named f32 tensors in a little-endian binary file.
//!
//! ```text
//! magic    "IRNF"
//! version  u32
//! count    u32
//! count x {
//!     id_len  u16, id  (UTF-8, id_len bytes)
//!     rank    u8,  dims (u32 x rank)
//!     data    f32 x prod(dims)
//! }
//! ```

use std::fs;
use std::path::Path;

use iresnet_core::engine::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IRNF";
pub const VERSION: u32 = 1;

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (id, t) in tensors {
        let id_len = u16::try_from(id.len()).map_err(|_| Error::Usage(format!("tensor id too long: {id}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Usage(format!("tensor {id} has rank {}", t.rank())))?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Usage(format!("tensor {id} dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
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
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Binary {
            path: self.path.to_path_buf(),
            offset,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint. `origin` only labels error messages.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<NamedTensors> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path: origin,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail(0, "not an IRNF checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let at = r.pos;
        let id_len = r.u16("id length")? as usize;
        let id = std::str::from_utf8(r.take(id_len, "id")?)
            .map_err(|_| r.fail(at + 2, "tensor id is not UTF-8"))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.fail(at, format!("tensor {id} shape {shape:?} overflows")))?;
        let data = r
            .take(numel, &format!("data of {id}"))?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((id, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn write(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    fs::write(path, encode(tensors)?).map_err(Error::io(path))
}

pub fn read(path: &Path) -> Result<NamedTensors> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes, path)
}
