//! `CDT1` binary blocks: magic, precision tag, rank, u32 dims, raw values.
//! Little-endian throughout.

use super::{Precision, Real, Shape, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"CDT1";

/// Appends one block holding `values` with the given dimensions.
pub fn write_block<T: Real>(out: &mut Vec<u8>, dims: &[usize], values: &[T]) -> Result<()> {
    let count: usize = dims.iter().product();
    if count != values.len() {
        return Err(Error::InvalidShape(format!(
            "dims {dims:?} hold {count} values, got {}",
            values.len()
        )));
    }
    let rank = u8::try_from(dims.len())
        .map_err(|_| Error::InvalidShape(format!("rank {} too large", dims.len())))?;
    out.reserve(6 + 4 * dims.len() + values.len() * T::PRECISION.byte_width());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(T::PRECISION.tag());
    out.push(rank);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidShape(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in values {
        v.write_le(out);
    }
    Ok(())
}

/// A decoded block whose values are still in their stored precision.
#[derive(Debug, Clone, PartialEq)]
pub struct RawBlock {
    pub precision: Precision,
    pub dims: Vec<usize>,
    payload: Vec<u8>,
}

impl RawBlock {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values converted to `T` (exact when precisions agree).
    pub fn values<T: Real>(&self) -> Vec<T> {
        match self.precision {
            Precision::Single => self
                .payload
                .chunks_exact(4)
                .map(|b| T::of(f32::read_le(b) as f64))
                .collect(),
            Precision::Double => self
                .payload
                .chunks_exact(8)
                .map(|b| T::of(f64::read_le(b)))
                .collect(),
        }
    }

    pub fn into_tensor<T: Real>(self) -> Result<Tensor<T>> {
        if self.dims.len() != 4 {
            return Err(Error::Format(format!("expected rank 4, found {}", self.dims.len())));
        }
        let shape = Shape::new(self.dims[0], self.dims[1], self.dims[2], self.dims[3]);
        Tensor::from_vec(shape, self.values())
    }
}

/// Decodes the block at the start of `bytes`; returns it and the bytes consumed.
pub fn read_block(bytes: &[u8]) -> Result<(RawBlock, usize)> {
    let truncated = || Error::Format("truncated tensor block".into());
    if bytes.len() < 6 {
        return Err(truncated());
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad tensor magic {:?}",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let precision = Precision::from_tag(bytes[4])?;
    let rank = bytes[5] as usize;
    let mut at = 6;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let raw = bytes.get(at..at + 4).ok_or_else(truncated)?;
        dims.push(u32::from_le_bytes(raw.try_into().expect("4 bytes")) as usize);
        at += 4;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor dims overflow".into()))?;
    let len = count
        .checked_mul(precision.byte_width())
        .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
    let payload = bytes.get(at..at + len).ok_or_else(truncated)?.to_vec();
    Ok((
        RawBlock {
            precision,
            dims,
            payload,
        },
        at + len,
    ))
}

impl<T: Real> Tensor<T> {
    pub fn to_cdt_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_block(&mut out, &self.shape().dims(), self.data()).expect("shape matches data");
        out
    }

    pub fn from_cdt_bytes(bytes: &[u8]) -> Result<Self> {
        let (block, used) = read_block(bytes)?;
        if used != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after tensor block",
                bytes.len() - used
            )));
        }
        block.into_tensor()
    }
}
