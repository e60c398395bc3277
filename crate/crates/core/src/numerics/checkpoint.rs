//! Checkpoint container: the magic `MMCKPT01`, a little-endian `u64` header
//! length, a JSON header `{names, shapes, dtype, config}`, then raw
//! little-endian `f32` payloads in header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MMCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub dtype: String,
    pub config: serde_json::Value,
}

/// Named tensors plus an arbitrary JSON configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: serde_json::Value) -> Self {
        Checkpoint {
            config,
            tensors: store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    /// Copy tensors into `store` by name; shapes and names must match exactly.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors in checkpoint, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
            let p = store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}`: shape {:?} vs model {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            names: self.tensors.iter().map(|(n, _)| n.clone()).collect(),
            shapes: self.tensors.iter().map(|(_, t)| t.shape().to_vec()).collect(),
            dtype: "f32".into(),
            config: self.config.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.dtype != "f32" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", header.dtype)));
        }
        if header.names.len() != header.shapes.len() {
            return Err(Error::Checkpoint("names/shapes length mismatch".into()));
        }
        let mut pos = 16 + hlen;
        let mut tensors = Vec::with_capacity(header.names.len());
        for (name, shape) in header.names.into_iter().zip(header.shapes) {
            let n: usize = shape.iter().product();
            let raw = bytes
                .get(pos..pos + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated payload for `{name}`")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
            pos += 4 * n;
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(Checkpoint {
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(fingerprint(&bytes))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_bytes(&bytes)?, fingerprint(&bytes)))
    }
}

/// Hex SHA-256 of serialized checkpoint bytes.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
