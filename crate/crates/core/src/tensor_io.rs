//! `MBT1` binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes          | content                          |
//! |----------------|----------------------------------|
//! | 0..4           | ASCII `MBT1`                     |
//! | 4              | dtype code: 0 = f32, 1 = u16     |
//! | 5              | rank (0..=5)                     |
//! | 6..6+4*rank    | dims as u32                      |
//! | rest           | row-major payload                |

use std::path::Path;

use crate::error::{MebtError, Result};

pub const MAGIC: &[u8; 4] = b"MBT1";
pub const MAX_RANK: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    U16(Vec<u16>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn code(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::U16(_) => 1,
        }
    }
}

/// An n-dimensional array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, ArrayData::F32(data))
    }

    pub fn u16(dims: Vec<usize>, data: Vec<u16>) -> Result<Self> {
        Self::new(dims, ArrayData::U16(data))
    }

    pub fn new(dims: Vec<usize>, data: ArrayData) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(MebtError::config(format!(
                "rank {} exceeds maximum {MAX_RANK}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(MebtError::config("dimension does not fit in u32"));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(MebtError::config(format!(
                "dims {dims:?} imply {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            ArrayData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u16(&self) -> Option<&[u16]> {
        match &self.data {
            ArrayData::U16(v) => Some(v),
            _ => None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.push(self.data.code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Decodes one array from the front of `bytes`; returns it with the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        let fmt = |offset: usize, msg: &str| MebtError::Format {
            offset,
            msg: msg.to_string(),
        };
        if bytes.len() < 6 {
            return Err(fmt(bytes.len(), "truncated header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(fmt(0, "bad magic, expected MBT1"));
        }
        let code = bytes[4];
        let rank = bytes[5] as usize;
        if rank > MAX_RANK {
            return Err(fmt(5, "rank exceeds 5"));
        }
        let mut pos = 6;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let Some(chunk) = bytes.get(pos..pos + 4) else {
                return Err(fmt(bytes.len(), "truncated dims"));
            };
            dims.push(u32::from_le_bytes(chunk.try_into().unwrap()) as usize);
            pos += 4;
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| fmt(6, "element count overflows"))?;
        let width = match code {
            0 => 4,
            1 => 2,
            _ => return Err(fmt(4, "unknown dtype code")),
        };
        let end = count
            .checked_mul(width)
            .and_then(|n| n.checked_add(pos))
            .ok_or_else(|| fmt(6, "payload size overflows"))?;
        if bytes.len() < end {
            return Err(fmt(bytes.len(), "truncated payload"));
        }
        let payload = &bytes[pos..end];
        let data = if code == 0 {
            ArrayData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        } else {
            ArrayData::U16(
                payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        };
        Ok((Self { dims, data }, end))
    }
}

pub fn write_tensor(path: impl AsRef<Path>, array: &Array) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, array.encode()).map_err(|e| MebtError::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Array> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| MebtError::io(path, e))?;
    let (array, used) = Array::decode(&bytes)?;
    if used != bytes.len() {
        return Err(MebtError::Format {
            offset: used,
            msg: "trailing bytes after payload".into(),
        });
    }
    Ok(array)
}
