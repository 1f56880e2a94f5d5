//! Binary tensor files.
//!
//! Layout: magic `HXT1`, `u32` rank (2 or 3), `rank` x `u64` dims, then the
//! payload as `f64` values. Every integer and float is little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor3};

pub const MAGIC: &[u8; 4] = b"HXT1";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    Matrix(Matrix),
    Tensor3(Tensor3),
}

impl TensorData {
    fn dims(&self) -> Vec<usize> {
        match self {
            TensorData::Matrix(m) => vec![m.rows(), m.cols()],
            TensorData::Tensor3(t) => t.dims().to_vec(),
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            TensorData::Matrix(m) => m.data(),
            TensorData::Tensor3(t) => t.data(),
        }
    }
}

impl From<Matrix> for TensorData {
    fn from(m: Matrix) -> Self {
        TensorData::Matrix(m)
    }
}

impl From<Tensor3> for TensorData {
    fn from(t: Tensor3) -> Self {
        TensorData::Tensor3(t)
    }
}

pub fn encode(t: &TensorData) -> Vec<u8> {
    let dims = t.dims();
    let values = t.values();
    let mut out = Vec::with_capacity(8 + dims.len() * 8 + values.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in &dims {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<TensorData> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::MalformedHeader("bad magic".into()));
    }
    let rank = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if rank != 2 && rank != 3 {
        return Err(Error::MalformedHeader(format!("unsupported rank {rank}")));
    }
    let raw_dims = (0..rank)
        .map(|_| Ok(u64::from_le_bytes(cur.take(8)?.try_into().unwrap())))
        .collect::<Result<Vec<u64>>>()?;
    let count = raw_dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|c| usize::try_from(c).ok())
        .filter(|c| c.checked_mul(8).is_some())
        .ok_or_else(|| Error::DimensionOverflow(raw_dims.clone()))?;
    let dims: Vec<usize> = raw_dims.iter().map(|&d| d as usize).collect();

    let payload = &bytes[cur.pos..];
    if payload.len() != count * 8 {
        return Err(Error::MalformedHeader(format!(
            "dims {dims:?} need {count} values, payload holds {} bytes",
            payload.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        values.push(v);
    }
    Ok(match dims[..] {
        [r, c] => TensorData::Matrix(Matrix::new(r, c, values)?),
        [a, b, c] => TensorData::Tensor3(Tensor3::new(a, b, c, values)?),
        _ => unreachable!(),
    })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorData> {
    decode(&fs::read(path)?)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &TensorData) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::MalformedHeader(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(s)
    }
}
