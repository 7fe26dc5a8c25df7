//! Checkpoint container shared by every trained component.
//!
//! A single self-describing binary file: magic, format version, a JSON header
//! (free-form manifest plus a tensor index), then all tensor data as
//! little-endian `f64`. Scalars are widened to `f64` on save and narrowed on
//! load, so `f32`-trained parameters round-trip exactly.
//!
//! Layout:
//! ```text
//! b"FVTC" | u32 version | u64 header_len | header JSON | payload (f64 LE)
//! ```

use crate::error::{Error, Result};
use crate::num::{c, Real};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FVTC";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    manifest: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the payload.
    offset: u64,
}

/// An in-memory checkpoint: a manifest and named tensors.
///
/// Tensor order is the BTreeMap name order, which makes the serialized bytes
/// (and therefore the checksum) independent of insertion order.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub manifest: serde_json::Value,
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Container {
    pub fn new(manifest: serde_json::Value) -> Self {
        Container {
            manifest,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert<T: Real, D: ndarray::Dimension>(
        &mut self,
        name: &str,
        tensor: &ndarray::Array<T, D>,
    ) {
        let widened = tensor.mapv(|v| v.to_f64().expect("finite scalar"));
        self.tensors.insert(name.to_string(), widened.into_dyn());
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn get<T: Real>(&self, name: &str) -> Result<ArrayD<T>> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Container(format!("tensor {name} missing")))?;
        Ok(t.mapv(|v| c::<T>(v)))
    }

    pub fn get2<T: Real>(&self, name: &str) -> Result<ndarray::Array2<T>> {
        self.get::<T>(name)?
            .into_dimensionality()
            .map_err(|e| Error::Container(format!("tensor {name} rank: {e}")))
    }

    pub fn get1<T: Real>(&self, name: &str) -> Result<ndarray::Array1<T>> {
        self.get::<T>(name)?
            .into_dimensionality()
            .map_err(|e| Error::Container(format!("tensor {name} rank: {e}")))
    }

    pub fn get4<T: Real>(&self, name: &str) -> Result<ndarray::Array4<T>> {
        self.get::<T>(name)?
            .into_dimensionality()
            .map_err(|e| Error::Container(format!("tensor {name} rank: {e}")))
    }

    fn encode(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            for &v in t.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.len() as u64;
        }
        let header = Header {
            manifest: self.manifest.clone(),
            tensors: entries,
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Container(format!("header encode: {e}")))?;
        let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let bytes = self.encode()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|_| {
            Error::MissingArtifact(format!("checkpoint not found: {}", path.display()))
        })?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(Error::Container("bad magic".to_string()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Container(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16 + header_len;
        if bytes.len() < header_end {
            return Err(Error::Container("truncated header".to_string()));
        }
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::Container(format!("header decode: {e}")))?;
        let payload = &bytes[header_end..];
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let len: usize = entry.shape.iter().product();
            let start = entry.offset as usize * 8;
            let end = start + len * 8;
            if payload.len() < end {
                return Err(Error::Container(format!("tensor {} truncated", entry.name)));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|chunk| f64::from_le_bytes(chunk.try_into().unwrap()))
                .collect();
            let arr = ArrayD::from_shape_vec(entry.shape.clone(), data)
                .map_err(|e| Error::Container(format!("tensor {}: {e}", entry.name)))?;
            tensors.insert(entry.name, arr);
        }
        Ok(Container {
            manifest: header.manifest,
            tensors,
        })
    }

    /// SHA-256 over the serialized container, hex-encoded. Stable across
    /// insertion order; changes iff a parameter or the manifest changes.
    pub fn checksum(&self) -> Result<String> {
        let bytes = self.encode()?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    /// Checksum over tensor data only, ignoring the manifest.
    pub fn params_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in &self.tensors {
            hasher.update(name.as_bytes());
            for &v in t.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Checksum of a checkpoint file on disk.
pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
