//! Directory container: `manifest.json` plus one `weights.bin` blob.
//!
//! Every tensor is little-endian f32, starting at a 64-byte aligned offset.
//! Offsets and lengths (in bytes) are recorded in the manifest, which fully
//! determines the blob layout.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::ModelConfig;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";
pub const ALIGNMENT: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        let t = Self {
            name: name.into(),
            shape,
            data,
        };
        debug_assert_eq!(t.numel(), t.data.len(), "tensor {}", t.name);
        t
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

/// A set of named tensors plus the manifest header fields.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub config: Option<ModelConfig>,
    pub metadata: Option<serde_json::Value>,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Serializes to `(manifest bytes, blob bytes)`.
    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut seen = HashSet::new();
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Validation(format!("duplicate tensor name `{}`", t.name)));
            }
            if t.numel() != t.data.len() {
                return Err(Error::shape(
                    &t.name,
                    format!("shape {:?} implies {} values, found {}", t.shape, t.numel(), t.data.len()),
                ));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { tensor: t.name.clone() });
            }
            let pad = (ALIGNMENT - blob.len() % ALIGNMENT) % ALIGNMENT;
            blob.resize(blob.len() + pad, 0u8);
            let offset = blob.len();
            blob.reserve(t.data.len() * 4);
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                dtype: "f32".to_string(),
                shape: t.shape.clone(),
                offset,
                length: t.data.len() * 4,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let mut json = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| Error::Manifest(e.to_string()))?;
        json.push(b'\n');
        Ok((json, blob))
    }

    pub fn decode(manifest_bytes: &[u8], blob: &[u8]) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_slice(manifest_bytes).map_err(|e| Error::Manifest(e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let mut seen = HashSet::new();
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            if !seen.insert(entry.name.as_str()) {
                return Err(Error::Manifest(format!("duplicate tensor name `{}`", entry.name)));
            }
            if entry.dtype != "f32" {
                return Err(Error::UnsupportedDtype {
                    tensor: entry.name.clone(),
                    dtype: entry.dtype.clone(),
                });
            }
            let numel: usize = entry.shape.iter().product();
            if entry.length != numel * 4 {
                return Err(Error::shape(
                    &entry.name,
                    format!(
                        "shape {:?} needs {} bytes but manifest length is {}",
                        entry.shape,
                        numel * 4,
                        entry.length
                    ),
                ));
            }
            let end = entry.offset.saturating_add(entry.length);
            if end > blob.len() {
                return Err(Error::shape(
                    &entry.name,
                    format!(
                        "blob holds {} bytes but tensor spans [{}, {})",
                        blob.len(),
                        entry.offset,
                        end
                    ),
                ));
            }
            let data: Vec<f32> = blob[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { tensor: entry.name.clone() });
            }
            tensors.push(Tensor {
                name: entry.name.clone(),
                shape: entry.shape.clone(),
                data,
            });
        }
        Ok(Self {
            config: manifest.config,
            metadata: manifest.metadata,
            tensors,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let (manifest, blob) = self.encode()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join(BLOB_FILE);
        fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let manifest = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join(BLOB_FILE);
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        Self::decode(&manifest, &blob)
    }

    /// SHA-256 over the encoded manifest followed by the blob, hex encoded.
    pub fn content_hash(&self) -> Result<String> {
        let (manifest, blob) = self.encode()?;
        let mut h = Sha256::new();
        h.update(&manifest);
        h.update(&blob);
        Ok(hex::encode(h.finalize()))
    }
}
