//! EVRP parameter checkpoints.
//!
//! Little-endian layout: magic `EVRP`, version `u32`, the config as
//! `depth, d_model, heads, k, mlp_hidden` (`u32` each), `seed: u64`,
//! `feature_dim: u32`, tensor count `u32`, then per tensor a `u16` name
//! length, UTF-8 name, rank `u8`, `u32` dims and `f64` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::model::{ReasoningConfig, ReasoningParams};
use super::tensor::Matrix;

const MAGIC: &[u8; 4] = b"EVRP";
const VERSION: u32 = 1;

pub fn encode_params(params: &ReasoningParams) -> Vec<u8> {
    let c = params.config();
    let mut out = Vec::with_capacity(64 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.depth, c.d_model, c.heads, c.k, c.mlp_hidden] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    out.extend_from_slice(&(params.feature_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(params.tensors().len() as u32).to_le_bytes());
    for t in params.tensors() {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(2);
        out.extend_from_slice(&(t.value.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.value.cols as u32).to_le_bytes());
        for v in &t.value.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::load(self.path, "truncated EVRP payload"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<ReasoningParams> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::load(path, "bad magic (expected EVRP)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::load(path, format!("unsupported EVRP version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = ReasoningConfig {
        depth: dims[0],
        d_model: dims[1],
        heads: dims[2],
        k: dims[3],
        mlp_hidden: dims[4],
        seed: r.u64()?,
    };
    let feature_dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::load(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let (rows, cols) = match shape.as_slice() {
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => return Err(Error::load(path, format!("tensor {name} has unsupported rank {rank}"))),
        };
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::load(path, format!("tensor {name} is larger than the file")))?;
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        named.push((name, Matrix::from_vec(rows, cols, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::load(path, "trailing bytes after EVRP payload"));
    }
    ReasoningParams::from_named(config, feature_dim, named).map_err(|e| Error::load(path, e.to_string()))
}

pub fn save_params(params: &ReasoningParams, path: &Path) -> Result<()> {
    fs::write(path, encode_params(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ReasoningParams> {
    let bytes = fs::read(path).map_err(|e| Error::load(path, format!("cannot read file: {e}")))?;
    decode_params(&bytes, path)
}
