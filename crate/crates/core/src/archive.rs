// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tensor archive container shared by weights, probing datasets, steering
//! vectors and ITI plans.
//!
//! Layout:
//!
//! ```text
//! [u64 LE: header length N][N bytes UTF-8 JSON header][zero pad to 64]
//! [tensor 0: f32 LE payload][zero pad to 64][tensor 1 ...]
//! ```
//!
//! The header lists tensors in payload order with their shapes; offsets
//! are implied by the 64-byte alignment rule.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::ModelConfig;

pub const FORMAT: &str = "tomlens.tensors";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<ModelConfig>,
    #[serde(default)]
    meta: serde_json::Map<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::MalformedArchive(format!(
                "tensor `{name}` shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }
}

/// In-memory form of an archive file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub config: Option<ModelConfig>,
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<Tensor>,
}

fn pad_to(len: usize) -> usize {
    len.div_ceil(ALIGN) * ALIGN
}

impl TensorArchive {
    pub fn push(&mut self, tensor: Tensor) {
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Fetches a tensor and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::MalformedArchive(format!("missing tensor `{name}`")))?;
        if t.shape != shape {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                actual: t.shape.clone(),
            });
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: FORMAT.to_string(),
            version: VERSION,
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(
            pad_to(8 + json.len()) + self.tensors.iter().map(|t| pad_to(t.data.len() * 4)).sum::<usize>(),
        );
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.resize(pad_to(out.len()), 0);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.resize(pad_to(out.len()), 0);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::MalformedArchive("file shorter than length prefix".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::MalformedArchive("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| Error::MalformedArchive(format!("bad header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::MalformedArchive(format!(
                "unknown format `{}`",
                header.format
            )));
        }
        if header.version != VERSION {
            return Err(Error::MalformedArchive(format!(
                "unsupported version {}",
                header.version
            )));
        }
        let mut offset = pad_to(header_end);
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::MalformedArchive("shape overflow".into()))?;
            let end = offset
                .checked_add(n * 4)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| {
                    Error::MalformedArchive(format!("truncated payload for `{}`", entry.name))
                })?;
            let data = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor {
                name: entry.name,
                shape: entry.shape,
                data,
            });
            offset = pad_to(end);
        }
        if bytes.len() != offset {
            return Err(Error::MalformedArchive(format!(
                "expected {offset} bytes, found {}",
                bytes.len()
            )));
        }
        Ok(Self {
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
