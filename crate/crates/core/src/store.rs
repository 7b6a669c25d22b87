//! The `.ibsm` model file: bit-exact little-endian float32 payload behind a JSON header.
//!
//! ```text
//! "IBSM" | version: u32 LE (=1) | header_len: u64 LE | header (UTF-8 JSON) | payload
//! ```
//!
//! The header lists layers in order; each parameter carries its shape plus the
//! byte offset and byte length of its data inside the payload. The offsets
//! must tile the payload exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bits::Role;
use crate::error::{Error, Result};
use crate::nn::{Layer, LayerKind, Model};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"IBSM";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub padding: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub params: Vec<ParamEntry>,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub role: Role,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
    pub nbytes: u64,
}

/// Serializes a model into the `.ibsm` byte layout.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut payload = Vec::with_capacity(model.param_count() * 4);
    let mut layers = Vec::with_capacity(model.layers().len());
    for layer in model.layers() {
        let mut params = Vec::new();
        for (role, t) in layer.params() {
            let offset = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            params.push(ParamEntry {
                role,
                shape: t.shape().to_vec(),
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        }
        layers.push(LayerEntry {
            name: layer.name().to_string(),
            kind: layer.kind(),
            padding: layer.padding(),
            params,
        });
    }
    let header = serde_json::to_vec(&Header {
        input_shape: model.input_shape(),
        layers,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

/// Splits a file into its parsed header and raw payload bytes.
pub fn split(bytes: &[u8], path: &str) -> Result<(Header, usize)> {
    if bytes.len() < PREAMBLE {
        return Err(Error::format(path, bytes.len() as u64, "file shorter than the 16-byte preamble"));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::format(path, 0, format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(path, 4, format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let payload_start = (PREAMBLE as u64)
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| Error::format(path, 8, format!("header length {header_len} exceeds file size")))? as usize;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..payload_start])
        .map_err(|e| Error::format(path, PREAMBLE as u64, format!("header JSON: {e}")))?;
    Ok((header, payload_start))
}

pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Model> {
    let (header, start) = split(bytes, path)?;
    let payload = &bytes[start..];
    let mut cursor = 0u64;
    let mut layers = Vec::with_capacity(header.layers.len());
    for entry in &header.layers {
        let mut tensors = Vec::new();
        for p in &entry.params {
            if p.offset != cursor {
                return Err(Error::format(
                    path,
                    start as u64 + cursor,
                    format!("{}.{}: offset {} leaves a gap or overlap (expected {cursor})", entry.name, p.role, p.offset),
                ));
            }
            let numel: usize = p.shape.iter().product();
            if p.nbytes != numel as u64 * 4 {
                return Err(Error::format(
                    path,
                    start as u64 + cursor,
                    format!("{}.{}: {} bytes for shape {:?}", entry.name, p.role, p.nbytes, p.shape),
                ));
            }
            let end = cursor + p.nbytes;
            if end > payload.len() as u64 {
                return Err(Error::format(path, bytes.len() as u64, format!("{}.{}: payload truncated", entry.name, p.role)));
            }
            let data = payload[cursor as usize..end as usize]
                .chunks_exact(4)
                .map(|b| f32::from_bits(u32::from_le_bytes(b.try_into().unwrap())))
                .collect();
            tensors.push((p.role, Tensor::new(p.shape.clone(), data).map_err(|e| Error::format(path, start as u64 + cursor, e.to_string()))?));
            cursor = end;
        }
        layers.push(build_layer(entry, tensors).map_err(|msg| Error::format(path, PREAMBLE as u64, msg))?);
    }
    if cursor != payload.len() as u64 {
        return Err(Error::format(
            path,
            start as u64 + cursor,
            format!("{} unaccounted payload bytes", payload.len() as u64 - cursor),
        ));
    }
    Model::new(header.input_shape, layers).map_err(|e| Error::format(path, PREAMBLE as u64, e.to_string()))
}

fn build_layer(entry: &LayerEntry, tensors: Vec<(Role, Tensor)>) -> std::result::Result<Layer, String> {
    let mut weight = None;
    let mut bias = None;
    for (role, t) in tensors {
        let slot = match role {
            Role::Weight => &mut weight,
            Role::Bias => &mut bias,
        };
        if slot.replace(t).is_some() {
            return Err(format!("layer `{}` lists {role} twice", entry.name));
        }
    }
    let name = entry.name.clone();
    match entry.kind {
        LayerKind::Relu | LayerKind::MaxPool2x2 => {
            if weight.is_some() || bias.is_some() {
                return Err(format!("layer `{name}` of kind {:?} cannot have parameters", entry.kind));
            }
            Ok(if entry.kind == LayerKind::Relu {
                Layer::relu(name)
            } else {
                Layer::maxpool2x2(name)
            })
        }
        LayerKind::Conv2d | LayerKind::Linear => {
            let (Some(w), Some(b)) = (weight, bias) else {
                return Err(format!("layer `{name}` needs both weight and bias"));
            };
            Ok(if entry.kind == LayerKind::Conv2d {
                Layer::conv2d(name, w, b, entry.padding)
            } else {
                Layer::linear(name, w, b)
            })
        }
    }
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, &path.display().to_string())
}

/// Number of differing bits between the payloads of two structurally identical files.
pub fn payload_hamming(a: &[u8], b: &[u8]) -> Result<u64> {
    let (ha, sa) = split(a, "<a>")?;
    let (hb, sb) = split(b, "<b>")?;
    if ha != hb {
        return Err(Error::arg("models differ in structure; bit distance is undefined"));
    }
    let (pa, pb) = (&a[sa..], &b[sb..]);
    if pa.len() != pb.len() {
        return Err(Error::arg("payload lengths differ"));
    }
    Ok(pa.iter().zip(pb).map(|(x, y)| (x ^ y).count_ones() as u64).sum())
}
