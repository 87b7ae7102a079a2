//! Parameter checkpoints: a flat manifest of named tensors in a little-endian
//! binary container with a JSON header.
//!
//! Layout:
//! ```text
//! magic   8 bytes  b"PMPMCKP1"
//! hlen    8 bytes  u64 LE, JSON header length in bytes
//! header  hlen bytes, JSON: { "entries": [{name, shape, offset, len}...], "meta": {...} }
//! values  concatenated f64 LE payloads, offsets relative to the values block
//! ```
//! Values round-trip bit-exactly (raw f64 bits are preserved).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PMPMCKP1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    entries: Vec<Entry>,
    meta: serde_json::Value,
}

/// In-memory checkpoint: ordered named tensors plus free-form JSON metadata
/// (step counters, RNG stream positions, bank cursors).
#[derive(Debug, Clone)]
pub struct Manifest {
    names: Vec<String>,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub meta: serde_json::Value,
}

impl Default for Manifest {
    fn default() -> Self {
        Self::new()
    }
}

impl Manifest {
    pub fn new() -> Self {
        Manifest {
            names: Vec::new(),
            tensors: BTreeMap::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) {
        if !self.tensors.contains_key(name) {
            self.names.push(name.to_string());
        }
        self.tensors
            .insert(name.to_string(), (shape.to_vec(), values));
    }

    pub fn insert_tensor(&mut self, name: &str, t: &Tensor) {
        self.insert(name, t.shape(), t.to_vec());
    }

    /// Record every (name, tensor) pair of a parameter list.
    pub fn insert_params(&mut self, prefix: &str, params: &[(String, Tensor)]) {
        for (name, t) in params {
            self.insert_tensor(&format!("{prefix}{name}"), t);
        }
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.tensors
            .get(name)
            .map(|(s, v)| (s.as_slice(), v.as_slice()))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Copy stored values into an existing parameter list, matching by name.
    pub fn load_params(&self, prefix: &str, params: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in params {
            let key = format!("{prefix}{name}");
            let (shape, values) = self.get(&key).ok_or_else(|| {
                Error::Checkpoint(format!("missing tensor `{key}` in checkpoint"))
            })?;
            if shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, expected {:?}",
                    shape,
                    t.shape()
                )));
            }
            t.set_data(values);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.names.len());
        let mut offset = 0usize;
        for name in &self.names {
            let (shape, values) = &self.tensors[name];
            entries.push(Entry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
                len: values.len(),
            });
            offset += values.len();
        }
        let header = Header {
            entries,
            meta: self.meta.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header_json.len() + offset * 8);
        out.write_all(MAGIC)?;
        out.write_all(&(header_json.len() as u64).to_le_bytes())?;
        out.write_all(&header_json)?;
        for name in &self.names {
            for v in &self.tensors[name].1 {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic in checkpoint file".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + hlen {
            return Err(Error::Checkpoint("truncated checkpoint header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])?;
        let values = &bytes[16 + hlen..];
        let mut manifest = Manifest::new();
        manifest.meta = header.meta;
        for e in &header.entries {
            let start = e.offset * 8;
            let end = start + e.len * 8;
            if end > values.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` overruns the values block",
                    e.name
                )));
            }
            let data: Vec<f64> = values[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.len() != e.shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` length does not match its shape",
                    e.name
                )));
            }
            manifest.insert(&e.name, &e.shape, data);
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Checkpoint(format!(
                "checkpoint not found: {}",
                path.display()
            )));
        }
        Manifest::from_bytes(&fs::read(path)?)
    }
}
