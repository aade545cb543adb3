//! `MFLW` weight files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MFLW" | version u16 | tensor count u32
//! per tensor: name len u16 | UTF-8 name | dtype u8 (0x00 = f32) | rank u8 | dims u32 × rank | f32 payload
//! CRC-32 (IEEE) of every preceding byte, u32
//! ```
//!
//! The same bytes are embedded verbatim in federation frames.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ModelWeights, Tensor};

pub const MAGIC: &[u8; 4] = b"MFLW";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0x00;

pub fn encode_weights(weights: &ModelWeights<f32>) -> Vec<u8> {
    let payload: usize = weights.iter().map(|(n, t)| n.len() + 4 + 4 * t.rank() + 4 * t.len()).sum();
    let mut out = Vec::with_capacity(14 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for (name, tensor) in weights.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(tensor.rank() as u8);
        for &d in tensor.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
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
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelWeights<f32>> {
    if bytes.len() < 14 {
        return Err(Error::Format(format!("{} bytes is too short", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut weights = ModelWeights::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype {dtype:#04x} for {name}")));
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("dims of {name} overflow")))?;
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Format("payload overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_vec(&dims, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        weights
            .insert(name, tensor)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes before checksum",
            body.len() - r.pos
        )));
    }
    Ok(weights)
}

pub fn write_weights(path: impl AsRef<Path>, weights: &ModelWeights<f32>) -> Result<()> {
    fs::write(path, encode_weights(weights))?;
    Ok(())
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<ModelWeights<f32>> {
    decode_weights(&fs::read(path)?)
}
