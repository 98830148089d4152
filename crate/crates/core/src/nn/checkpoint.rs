//! Length-prefixed binary parameter file.
//!
//! Layout (little-endian): `version u32, spec_hash u64, seed u64`, then until
//! end of file, one record per tensor:
//! `name_len u32, name bytes (UTF-8), rank u32, extents u64 × rank, values f64 × len`.

use std::fs;
use std::path::Path;

use crate::error::{NcvError, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub spec_hash: u64,
    pub seed: u64,
}

pub fn encode(header: &CheckpointHeader, tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&header.version.to_le_bytes());
    out.extend_from_slice(&header.spec_hash.to_le_bytes());
    out.extend_from_slice(&header.seed.to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
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

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(NcvError::format(None, format!("checkpoint truncated reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let header = CheckpointHeader {
        version: r.u32("version")?,
        spec_hash: r.u64("spec hash")?,
        seed: r.u64("seed")?,
    };
    if header.version != FORMAT_VERSION {
        return Err(NcvError::format(
            None,
            format!("unsupported checkpoint version {}", header.version),
        ));
    }
    let mut tensors = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| NcvError::format(None, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| NcvError::format(None, "tensor too large"))?, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok((header, tensors))
}

pub fn save(path: &Path, header: &CheckpointHeader, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode(header, tensors))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    decode(&fs::read(path)?)
}
