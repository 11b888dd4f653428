//! EMB1 tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   4 bytes   magic "EMB1" (0x45 0x4D 0x42 0x31)
//! offset 4   1 byte    version (0x01)
//! offset 5   4 bytes   manifest length L (u32)
//! offset 9   L bytes   manifest, UTF-8 JSON
//! offset 9+L ...       payload: each tensor row-major, IEEE-754, in manifest order
//! ```
//!
//! The manifest is `{"dtype": "f64"|"f32", "tensors": [{"name", "rows", "cols", "frozen"?}], "meta": {...}}`.
//! `f32` payloads are widened to `f64` on load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseErrorKind, Result};
use crate::numkit::DenseMatrix;

pub const MAGIC: [u8; 4] = *b"EMB1";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F64,
    F32,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frozen: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    dtype: DType,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Ordered collection of named matrices plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub dtype: DType,
    pub meta: serde_json::Value,
    tensors: Vec<(TensorEntry, DenseMatrix)>,
}

impl Container {
    pub fn new(dtype: DType, meta: serde_json::Value) -> Self {
        Container {
            dtype,
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, matrix: DenseMatrix, frozen: Option<bool>) {
        let entry = TensorEntry {
            name: name.into(),
            rows: matrix.rows(),
            cols: matrix.cols(),
            frozen,
        };
        self.tensors.push((entry, matrix));
    }

    pub fn entries(&self) -> impl Iterator<Item = &TensorEntry> {
        self.tensors.iter().map(|(e, _)| e)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&TensorEntry, &DenseMatrix)> {
        self.tensors.iter().map(|(e, m)| (e, m))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&DenseMatrix> {
        self.entry(name).map(|(_, m)| m)
    }

    pub fn entry(&self, name: &str) -> Result<(&TensorEntry, &DenseMatrix)> {
        self.tensors
            .iter()
            .find(|(e, _)| e.name == name)
            .map(|(e, m)| (e, m))
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let manifest = Manifest {
            dtype: self.dtype,
            tensors: self.tensors.iter().map(|(e, _)| e.clone()).collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let payload: usize = self.tensors.iter().map(|(_, m)| m.len() * self.dtype.width()).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload);
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in &self.tensors {
            for &v in m.as_slice() {
                match self.dtype {
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, kind: ParseErrorKind| Error::Parse { offset, kind };
        if bytes.len() < HEADER_LEN {
            return Err(parse(
                0,
                ParseErrorKind::TruncatedHeader {
                    needed: HEADER_LEN,
                    available: bytes.len(),
                },
            ));
        }
        if bytes[..4] != MAGIC {
            return Err(parse(
                0,
                ParseErrorKind::BadMagic {
                    found: bytes[..4].to_vec(),
                },
            ));
        }
        if bytes[4] != VERSION {
            return Err(parse(4, ParseErrorKind::UnsupportedVersion(bytes[4])));
        }
        let manifest_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let manifest_end = HEADER_LEN + manifest_len;
        if bytes.len() < manifest_end {
            return Err(parse(
                HEADER_LEN,
                ParseErrorKind::TruncatedHeader {
                    needed: manifest_len,
                    available: bytes.len() - HEADER_LEN,
                },
            ));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
            .map_err(|e| parse(HEADER_LEN, ParseErrorKind::Manifest(e.to_string())))?;

        let width = manifest.dtype.width();
        let mut offset = manifest_end;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in manifest.tensors {
            let count = entry.rows.checked_mul(entry.cols).ok_or_else(|| {
                parse(
                    offset,
                    ParseErrorKind::Dimensions(format!("tensor `{}` shape overflows", entry.name)),
                )
            })?;
            let needed = count * width;
            let available = bytes.len() - offset;
            if available < needed {
                return Err(parse(
                    offset,
                    ParseErrorKind::TruncatedPayload {
                        tensor: entry.name.clone(),
                        needed,
                        available,
                    },
                ));
            }
            let raw = &bytes[offset..offset + needed];
            let data: Vec<f64> = match manifest.dtype {
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            let matrix = DenseMatrix::from_vec(entry.rows, entry.cols, data).map_err(|e| {
                parse(offset, ParseErrorKind::Dimensions(format!("tensor `{}`: {e}", entry.name)))
            })?;
            offset += needed;
            tensors.push((entry, matrix));
        }
        if offset != bytes.len() {
            return Err(parse(
                offset,
                ParseErrorKind::TrailingBytes {
                    trailing: bytes.len() - offset,
                },
            ));
        }
        Ok(Container {
            dtype: manifest.dtype,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
