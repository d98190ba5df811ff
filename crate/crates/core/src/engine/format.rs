//! Binary container for [`QuantizedModel`].
//!
//! Layout: `b"FATQ"`, `u32` version, `u32` manifest length, manifest JSON,
//! zero padding to an 8-byte boundary, then the blob section. Each blob
//! (i8 weights, i32 biases, f64 multipliers) starts on an 8-byte boundary.
//! All integers are little-endian.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{FloatOp, FusedActivation, LinearKind, LinearOp, Op, QuantizedModel, SiteGrid};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FATQ";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct BlobRef {
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum OpEntry {
    Linear {
        id: String,
        kind: LinearKind,
        input: String,
        output: String,
        activation: FusedActivation,
        weight_shape: Vec<usize>,
        weight_offset: i32,
        weight_zero_points: Vec<i32>,
        weights: BlobRef,
        bias: BlobRef,
        multipliers: BlobRef,
    },
    Float(FloatOp),
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    input_id: String,
    output_id: String,
    meta: BTreeMap<String, String>,
    sites: BTreeMap<String, SiteGrid>,
    ops: Vec<OpEntry>,
}

fn pad8(buf: &mut Vec<u8>) {
    while buf.len() % 8 != 0 {
        buf.push(0);
    }
}

struct Blobs(Vec<u8>);

impl Blobs {
    fn push(&mut self, bytes: impl IntoIterator<Item = u8>, len: usize) -> BlobRef {
        pad8(&mut self.0);
        let offset = self.0.len() as u64;
        self.0.extend(bytes);
        BlobRef {
            offset,
            len: len as u64,
        }
    }
}

/// Serializes the model. Output depends only on the model contents.
pub fn export(m: &QuantizedModel) -> Vec<u8> {
    let mut blobs = Blobs(Vec::new());
    let ops = m
        .ops
        .iter()
        .map(|op| match op {
            Op::Float(f) => OpEntry::Float(f.clone()),
            Op::Linear(l) => OpEntry::Linear {
                id: l.id.clone(),
                kind: l.kind,
                input: l.input.clone(),
                output: l.output.clone(),
                activation: l.activation,
                weight_shape: l.weight_shape.clone(),
                weight_offset: l.weight_offset,
                weight_zero_points: l.weight_zero_points.clone(),
                weights: blobs.push(l.weights.iter().map(|&w| w as u8), l.weights.len()),
                bias: blobs.push(l.bias.iter().flat_map(|b| b.to_le_bytes()), l.bias.len()),
                multipliers: blobs.push(l.multipliers.iter().flat_map(|v| v.to_le_bytes()), l.multipliers.len()),
            },
        })
        .collect();
    let manifest = Manifest {
        input_id: m.input_id.clone(),
        output_id: m.output_id.clone(),
        meta: m.meta.clone(),
        sites: m.sites.clone(),
        ops,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + blobs.0.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    pad8(&mut out);
    out.extend_from_slice(&blobs.0);
    out
}

fn blob<'a>(data: &'a [u8], r: BlobRef, width: usize, what: &str) -> Result<&'a [u8]> {
    let start = usize::try_from(r.offset).map_err(|_| Error::Corrupt(format!("{what} offset")))?;
    let len = usize::try_from(r.len)
        .ok()
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| Error::Corrupt(format!("{what} length")))?;
    if start % 8 != 0 {
        return Err(Error::Corrupt(format!("{what} blob is misaligned")));
    }
    data.get(start..start.saturating_add(len))
        .ok_or_else(|| Error::Corrupt(format!("{what} blob runs past the end of the stream")))
}

/// Parses a stream written by [`export`].
pub fn import(bytes: &[u8]) -> Result<QuantizedModel> {
    if bytes.len() < 12 {
        return Err(Error::Corrupt(format!("stream of {} bytes has no header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("missing FATQ magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(12..12 + json_len)
        .ok_or_else(|| Error::Corrupt("manifest truncated".into()))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::Corrupt(format!("manifest: {e}")))?;
    let data_start = (12 + json_len).div_ceil(8) * 8;
    let data = bytes.get(data_start..).unwrap_or(&[]);

    let ops = manifest
        .ops
        .into_iter()
        .map(|e| {
            Ok(match e {
                OpEntry::Float(f) => Op::Float(f),
                OpEntry::Linear {
                    id,
                    kind,
                    input,
                    output,
                    activation,
                    weight_shape,
                    weight_offset,
                    weight_zero_points,
                    weights,
                    bias,
                    multipliers,
                } => {
                    let w = blob(data, weights, 1, "weights")?.iter().map(|&b| b as i8).collect();
                    let b = blob(data, bias, 4, "bias")?
                        .chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    let mult = blob(data, multipliers, 8, "multipliers")?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Op::Linear(LinearOp {
                        id,
                        kind,
                        input,
                        output,
                        activation,
                        weight_shape,
                        weights: w,
                        weight_offset,
                        weight_zero_points,
                        bias: b,
                        multipliers: mult,
                    })
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = QuantizedModel {
        input_id: manifest.input_id,
        output_id: manifest.output_id,
        sites: manifest.sites,
        ops,
        meta: manifest.meta,
    };
    m.validate()?;
    Ok(m)
}
