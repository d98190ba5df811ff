//! IDX reader (the big-endian format used by MNIST-style datasets).
//!
//! Files compressed with gzip are decompressed transparently.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxType {
    U8,
    I8,
    I16,
    I32,
    F32,
    F64,
}

impl IdxType {
    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0x08 => IdxType::U8,
            0x09 => IdxType::I8,
            0x0B => IdxType::I16,
            0x0C => IdxType::I32,
            0x0D => IdxType::F32,
            0x0E => IdxType::F64,
            _ => return None,
        })
    }

    fn width(self) -> usize {
        match self {
            IdxType::U8 | IdxType::I8 => 1,
            IdxType::I16 => 2,
            IdxType::I32 | IdxType::F32 => 4,
            IdxType::F64 => 8,
        }
    }
}

/// Decoded IDX payload before any scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dtype: IdxType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Truncated(format!("{}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an in-memory IDX buffer.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Truncated(format!("{} byte header", bytes.len())));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::BadMagic(format!(
            "leading bytes {:#04x} {:#04x}",
            bytes[0], bytes[1]
        )));
    }
    let dtype = IdxType::from_code(bytes[2]).ok_or_else(|| Error::BadMagic(format!("type code {:#04x}", bytes[2])))?;
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(Error::BadMagic("zero dimensions".into()));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Truncated(format!(
            "header needs {header} bytes, have {}",
            bytes.len()
        )));
    }
    let shape: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(Error::BadMagic(format!("zero-sized dimension in {shape:?}")));
    }
    let count: usize = shape.iter().product();
    let payload = &bytes[header..];
    let need = count * dtype.width();
    if payload.len() < need {
        return Err(Error::Truncated(format!(
            "payload needs {need} bytes, have {}",
            payload.len()
        )));
    }
    let payload = &payload[..need];
    let values = match dtype {
        IdxType::U8 => payload.iter().map(|&b| b as f64).collect(),
        IdxType::I8 => payload.iter().map(|&b| b as i8 as f64).collect(),
        IdxType::I16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_be_bytes([c[0], c[1]]) as f64)
            .collect(),
        IdxType::I32 => payload
            .chunks_exact(4)
            .map(|c| i32::from_be_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        IdxType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        IdxType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok(IdxArray { dtype, shape, values })
}

pub fn read_idx_raw(path: impl AsRef<Path>) -> Result<IdxArray> {
    parse_idx(&read_bytes(path.as_ref())?)
}

/// Reads an IDX file as a real tensor with its declared dimensions.
/// Unsigned-byte payloads are scaled to `[0, 1]`.
pub fn read_idx(path: impl AsRef<Path>) -> Result<Tensor> {
    let arr = read_idx_raw(path)?;
    let values = if arr.dtype == IdxType::U8 {
        arr.values.into_iter().map(|v| v / 255.0).collect()
    } else {
        arr.values
    };
    Tensor::new(arr.shape, values)
}

/// Reads a one-dimensional IDX label file.
pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let arr = read_idx_raw(path)?;
    if arr.shape.len() != 1 {
        return Err(Error::shape(format!("label file must be 1-d, got {:?}", arr.shape)));
    }
    arr.values
        .into_iter()
        .map(|v| {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(Error::InvalidArgument(format!("label {v} is not a class index")))
            }
        })
        .collect()
}

/// Serializes unsigned-byte data as IDX. Used for test fixtures and
/// dataset export.
pub fn encode_idx_u8(shape: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, shape.len() as u8];
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}
