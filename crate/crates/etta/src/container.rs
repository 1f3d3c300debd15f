//! Named-array container: the one on-disk format for checkpoints, source
//! statistics, and datasets.
//!
//! Layout: 8-byte magic `ETTAVIT1`, a little-endian u64 manifest length, a
//! UTF-8 JSON manifest (version, free-form `meta`, ordered entries with
//! name/shape/offset), then the raw little-endian f32 arrays back to back.
//! Offsets are relative to the start of the data section and must be exactly
//! contiguous, which makes write -> read -> write byte-identical.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ETTAVIT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    meta: Value,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// In-memory view of a container: free-form metadata plus ordered named
/// arrays.
#[derive(Debug, Clone)]
pub struct NamedArrays {
    pub meta: Value,
    entries: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl NamedArrays {
    pub fn new(meta: Value) -> Self {
        NamedArrays {
            meta,
            entries: Vec::new(),
        }
    }

    /// Appends an array; names must be unique within a container.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Format(format!(
                "array {name}: shape {shape:?} vs {} values",
                data.len()
            )));
        }
        if self.entries.iter().any(|(en, _, _)| *en == name) {
            return Err(Error::Format(format!("duplicate array name {name}")));
        }
        self.entries.push((name, shape, data));
        Ok(())
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        self.push(name, t.shape().to_vec(), t.data().to_vec())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    /// Fetches an array as a tensor, checking the expected shape.
    pub fn tensor(&self, name: &str, expect_shape: Option<&[usize]>) -> Result<Tensor> {
        let (shape, data) = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing array {name}")))?;
        if let Some(want) = expect_shape {
            if shape != want {
                return Err(Error::Format(format!(
                    "array {name}: shape {shape:?}, config implies {want:?}"
                )));
            }
        }
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Serializes to the container byte format.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut manifest_entries = Vec::with_capacity(self.entries.len());
        for (name, shape, data) in &self.entries {
            manifest_entries.push(ManifestEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            });
            offset += (data.len() * 4) as u64;
        }
        let manifest = Manifest {
            version: VERSION,
            meta: self.meta.clone(),
            entries: manifest_entries,
        };
        let manifest_json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + manifest_json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest_json);
        for (_, _, data) in &self.entries {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses the container byte format, validating magic, version, manifest
    /// consistency, and completeness of the data section.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("container truncated before manifest".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic; not a container file".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + mlen {
            return Err(Error::Format("container truncated inside manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])
            .map_err(|e| Error::Format(format!("bad manifest json: {e}")))?;
        if manifest.version != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {}",
                manifest.version
            )));
        }
        let data = &bytes[16 + mlen..];
        let mut entries = Vec::with_capacity(manifest.entries.len());
        let mut expect_offset = 0u64;
        for e in &manifest.entries {
            let count: usize = e.shape.iter().product();
            if e.shape.iter().any(|&d| d == 0) {
                return Err(Error::Format(format!("array {}: zero-sized dim", e.name)));
            }
            if e.offset != expect_offset {
                return Err(Error::Format(format!(
                    "array {}: offset {} not contiguous (expected {expect_offset})",
                    e.name, e.offset
                )));
            }
            let start = e.offset as usize;
            let end = start + count * 4;
            if end > data.len() {
                return Err(Error::Format(format!(
                    "array {}: truncated file (needs {end} data bytes, has {})",
                    e.name,
                    data.len()
                )));
            }
            let values: Vec<f32> = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((e.name.clone(), e.shape.clone(), values));
            expect_offset = end as u64;
        }
        if expect_offset as usize != data.len() {
            return Err(Error::Format(format!(
                "container has {} trailing data bytes",
                data.len() - expect_offset as usize
            )));
        }
        Ok(NamedArrays {
            meta: manifest.meta,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}
