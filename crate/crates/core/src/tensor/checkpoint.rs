//! Checkpoint container.
//!
//! Layout: the magic bytes `DKT1`, a little-endian `u64` manifest length, the
//! UTF-8 JSON manifest, then every tensor as raw little-endian `f64` values at
//! the byte offsets (relative to the start of the blob section) recorded in the
//! manifest.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DKT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, config: serde_json::Value, params: &ParamStore) -> Result<()> {
    let mut entries = Vec::with_capacity(params.len());
    let mut blob = Vec::new();
    for (name, t) in params.iter() {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset,
            nbytes: blob.len() as u64 - offset,
        });
    }
    let manifest = serde_json::to_vec(&CheckpointManifest { config, tensors: entries })?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(manifest.len() as u64).to_le_bytes())?;
    f.write_all(&manifest)?;
    f.write_all(&blob)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointManifest, ParamStore)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a DKT1 checkpoint", path.display())));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body_start = 12 + len;
    if bytes.len() < body_start {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[12..body_start])?;
    let blob = &bytes[body_start..];
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        if e.dtype != "f64" {
            return Err(Error::Checkpoint(format!("unsupported dtype `{}` for {}", e.dtype, e.name)));
        }
        let (start, end) = (e.offset as usize, (e.offset + e.nbytes) as usize);
        let numel: usize = e.shape.iter().product();
        if end > blob.len() || e.nbytes as usize != numel * 8 {
            return Err(Error::Checkpoint(format!("tensor {} has an invalid byte range", e.name)));
        }
        let data = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok((manifest, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dkt");
        let mut store = ParamStore::new();
        store.insert("a", Tensor::new(vec![2, 2], vec![0.1, -2.5e-300, 3.0, f64::MIN_POSITIVE]).unwrap());
        store.insert("b", Tensor::new(vec![3], vec![1.0 / 3.0, 7.0, -0.0]).unwrap());
        save_checkpoint(&path, serde_json::json!({"k": 1}), &store).unwrap();
        let (manifest, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(manifest.config["k"], 1);
        for ((n1, t1), (n2, t2)) in store.iter().zip(loaded.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.dkt");
        std::fs::write(&path, b"NOPE00000000").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
