//! Tensor container: a small safetensors-like file for `f32` weights.
//!
//! Layout:
//!
//! ```text
//! [0..8)    ASCII magic "ATTNTNSR"
//! [8..16)   little-endian u64 header length
//! [16..)    UTF-8 JSON header: { name: { "dtype": "f32", "shape": [..], "offset": o, "length": n } }
//! then      payload of little-endian f32, row-major; offset/length in bytes from payload start
//! ```
//!
//! The attention dump uses the same magic + length + JSON framing, so the
//! framing helpers live here too.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONTAINER_MAGIC: &[u8; 8] = b"ATTNTNSR";

// Headers larger than this are rejected before allocation.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("invalid header: {0}")]
    Header(String),
    #[error("unsupported dtype {dtype:?} for tensor {name:?}")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor {name:?} is out of bounds or mis-sized: {message}")]
    Layout { name: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Writes `magic | u64 header length | header | payload`.
pub(crate) fn write_framed<W: Write>(
    mut w: W,
    magic: &[u8; 8],
    header: &[u8],
    payload: &[u8],
) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header)?;
    w.write_all(payload)?;
    w.flush()
}

/// Reads a framed file, returning `(header bytes, payload bytes)`.
pub(crate) fn read_framed<R: Read>(
    mut r: R,
    magic: &[u8; 8],
) -> Result<(Vec<u8>, Vec<u8>), ContainerError> {
    let mut found = [0u8; 8];
    r.read_exact(&mut found)?;
    if &found != magic {
        return Err(ContainerError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER_LEN {
        return Err(ContainerError::Header(format!("header length {len} is implausibly large")));
    }
    let mut header = vec![0u8; len as usize];
    r.read_exact(&mut header)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    Ok((header, payload))
}

pub(crate) fn f32s_to_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn le_bytes_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// A dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Panics if `data.len()` does not match the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data does not match shape");
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

/// Named tensors, kept in name order so serialization is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    tensors: BTreeMap<String, Tensor>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn write<W: Write>(&self, w: W) -> Result<(), ContainerError> {
        let mut header = BTreeMap::new();
        let mut payload = Vec::new();
        for (name, tensor) in &self.tensors {
            let bytes = f32s_to_le_bytes(&tensor.data);
            header.insert(
                name.as_str(),
                HeaderEntry {
                    dtype: "f32".into(),
                    shape: tensor.shape.clone(),
                    offset: payload.len(),
                    length: bytes.len(),
                },
            );
            payload.extend_from_slice(&bytes);
        }
        let header = serde_json::to_vec(&header).map_err(|e| ContainerError::Header(e.to_string()))?;
        write_framed(w, CONTAINER_MAGIC, &header, &payload)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read<R: Read>(r: R) -> Result<Self, ContainerError> {
        let (header, payload) = read_framed(r, CONTAINER_MAGIC)?;
        let header: BTreeMap<String, HeaderEntry> =
            serde_json::from_slice(&header).map_err(|e| ContainerError::Header(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, entry) in header {
            if entry.dtype != "f32" {
                return Err(ContainerError::UnsupportedDtype { name, dtype: entry.dtype });
            }
            let count: usize = entry.shape.iter().product();
            if entry.length != count * 4 {
                return Err(ContainerError::Layout {
                    message: format!("shape {:?} needs {} bytes, header says {}", entry.shape, count * 4, entry.length),
                    name,
                });
            }
            let end = entry.offset.checked_add(entry.length).filter(|&e| e <= payload.len());
            let Some(end) = end else {
                return Err(ContainerError::Layout {
                    message: format!(
                        "bytes {}..{} exceed payload of {} bytes",
                        entry.offset,
                        entry.offset.saturating_add(entry.length),
                        payload.len()
                    ),
                    name,
                });
            };
            let data = le_bytes_to_f32s(&payload[entry.offset..end]);
            tensors.insert(name, Tensor { shape: entry.shape, data });
        }
        Ok(Self { tensors })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        Self::read(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorContainer {
        let mut c = TensorContainer::new();
        c.insert("b", Tensor::new(vec![3], vec![1.0, -0.0, f32::MIN_POSITIVE]));
        c.insert("a", Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]));
        c
    }

    #[test]
    fn layout_matches_format() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], b"ATTNTNSR");
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        assert_eq!(header["a"]["offset"], 0);
        assert_eq!(header["a"]["length"], 16);
        assert_eq!(header["b"]["offset"], 16);
        assert_eq!(header["b"]["shape"], serde_json::json!([3]));
        let payload = &bytes[16 + len..];
        assert_eq!(payload.len(), 28);
        assert_eq!(&payload[..4], &0.1f32.to_le_bytes());
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = TensorContainer::from_bytes(&c.to_bytes()).unwrap();
        for (name, t) in c.iter() {
            let u = back.get(name).unwrap();
            assert_eq!(t.shape(), u.shape());
            let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t), bits(u));
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(TensorContainer::from_bytes(&bytes), Err(ContainerError::BadMagic { .. })));
    }

    #[test]
    fn rejects_truncated_payload() {
        let bytes = sample().to_bytes();
        let err = TensorContainer::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(matches!(err, ContainerError::Layout { .. }), "{err}");
    }

    #[test]
    fn rejects_other_dtypes() {
        let header = br#"{"x":{"dtype":"f16","shape":[1],"offset":0,"length":2}}"#;
        let mut bytes = Vec::new();
        write_framed(&mut bytes, CONTAINER_MAGIC, header, &[0, 0]).unwrap();
        assert!(matches!(
            TensorContainer::from_bytes(&bytes),
            Err(ContainerError::UnsupportedDtype { .. })
        ));
    }
}
