//! Flat little-endian container of named `f64` tensors.
//!
//! Each tensor is laid out as
//!
//! ```text
//! name_len: u32 | name: [u8; name_len] (UTF-8) | rank: u32 | dims: [u64; rank] | payload: [f64; Π dims]
//! ```
//!
//! A checkpoint file is the magic `GFT1`, a `u32` tensor count, then the
//! tensors in order. Node update messages embed tensors with the same layout.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GFT1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    pub fn from_vec(name: impl Into<String>, v: &[f64]) -> Self {
        Self {
            name: name.into(),
            dims: vec![v.len()],
            data: v.to_vec(),
        }
    }

    /// Rank-2 tensors map to their shape; rank-1 tensors to a row vector.
    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims.as_slice() {
            [r, c] => Matrix::new(*r, *c, self.data.clone()),
            [n] => Matrix::new(1, *n, self.data.clone()),
            other => Err(Error::Decode(format!(
                "tensor {} has rank {}, expected 1 or 2",
                self.name,
                other.len()
            ))),
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    /// Serialized size in bytes.
    pub fn encoded_len(&self) -> usize {
        tensor_encoded_len(self.name.len(), &self.dims)
    }
}

/// Serialized size of a tensor with the given name length and shape.
pub fn tensor_encoded_len(name_len: usize, dims: &[usize]) -> usize {
    4 + name_len + 4 + 8 * dims.len() + 8 * dims.iter().product::<usize>()
}

pub fn put_u8(buf: &mut Vec<u8>, v: u8) {
    buf.push(v);
}

pub fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn put_tensor(buf: &mut Vec<u8>, t: &NamedTensor) {
    put_u32(buf, t.name.len() as u32);
    buf.extend_from_slice(t.name.as_bytes());
    put_u32(buf, t.dims.len() as u32);
    for &d in &t.dims {
        put_u64(buf, d as u64);
    }
    for &x in &t.data {
        put_f64(buf, x);
    }
}

/// Cursor over a little-endian byte buffer.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Decode(format!(
                "truncated buffer: need {n} bytes at offset {}, have {}",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let v = f64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(Error::Decode(format!("non-finite f64 at offset {}", self.pos - 8)));
        }
        Ok(v)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn tensor(&mut self) -> Result<NamedTensor> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.bytes(name_len)?)
            .map_err(|e| Error::Decode(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Decode(format!("tensor {name}: implausible rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.saturating_mul(8) <= self.remaining())
            .ok_or_else(|| Error::Decode(format!("tensor {name}: payload exceeds buffer")))?;
        let data = self.f64s(numel)?;
        Ok(NamedTensor { name, dims, data })
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.bytes(4)?;
        if got != magic {
            return Err(Error::Decode(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Decode(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

pub fn encode_checkpoint(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut buf, tensors.len() as u32);
    for t in tensors {
        put_tensor(&mut buf, t);
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader::new(bytes);
    r.expect_magic(&CHECKPOINT_MAGIC)?;
    let n = r.u32()? as usize;
    let tensors = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(tensors)
}

pub fn save_checkpoint(path: impl AsRef<Path>, tensors: &[NamedTensor]) -> Result<()> {
    std::fs::write(path, encode_checkpoint(tensors))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    decode_checkpoint(&std::fs::read(path)?)
}
