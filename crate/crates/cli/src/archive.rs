//! Tensor archive: an 8-byte magic, a little-endian `u64` manifest length,
//! a JSON manifest, then the raw little-endian `f32` blobs in manifest
//! order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use ctxpeft_core::Tensor;
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 8] = b"CTXARCH1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    metadata: BTreeMap<String, String>,
    tensors: Vec<Entry>,
}

/// Named tensors plus a string metadata map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        let mut t = t.clone();
        t.set_requires_grad(false);
        self.tensors.push((name.into(), t));
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .with_context(|| format!("archive metadata has no `{key}` entry"))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            ensure!(entries.iter().all(|e: &Entry| &e.name != name), "duplicate tensor name `{name}`");
            let nbytes = (t.numel() * 4) as u64;
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let manifest = serde_json::to_vec(&Manifest {
            version: 1,
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= 16 && &bytes[..8] == MAGIC, "not a tensor archive (bad magic)");
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(len)
            .filter(|&end| end <= bytes.len())
            .context("manifest length exceeds the file size")?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..body]).context("corrupt manifest")?;
        ensure!(manifest.version == 1, "unsupported archive version {}", manifest.version);
        let blob = &bytes[body..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                bail!("tensor `{}` has unsupported dtype `{}`", e.name, e.dtype);
            }
            let numel: usize = e.shape.iter().product();
            ensure!(
                e.offset == expected && e.nbytes == numel as u64 * 4,
                "tensor `{}` has an inconsistent offset or size",
                e.name
            );
            let end = (e.offset + e.nbytes) as usize;
            ensure!(end <= blob.len(), "tensor `{}` runs past the end of the file", e.name);
            let data = blob[e.offset as usize..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
            expected = e.offset + e.nbytes;
        }
        ensure!(expected as usize == blob.len(), "trailing bytes after the last tensor");
        Ok(Self {
            metadata: manifest.metadata,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new();
        a.set_meta("kind", "test");
        a.push("x", &Tensor::new(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap());
        a.push("y", &Tensor::new(&[], vec![7.0]).unwrap());
        a
    }

    #[test]
    fn round_trip_is_exact() {
        let a = sample();
        let b = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.get("x").unwrap().data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn bytes_are_deterministic() {
        assert_eq!(sample().to_bytes().unwrap(), sample().to_bytes().unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Archive::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[20] = b'#';
        assert!(Archive::from_bytes(&bad).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut a = sample();
        a.push("x", &Tensor::zeros(&[1]));
        assert!(a.to_bytes().is_err());
    }
}
