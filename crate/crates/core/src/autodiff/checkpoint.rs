//! Checkpoints: a flat little-endian `f64` blob plus a JSON manifest of
//! `{name, offset, shape}` entries (offsets count values, not bytes).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

fn paths(stem: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn save_checkpoint(params: &ParamStore, stem: &Path) -> Result<()> {
    let (bin, json) = paths(stem);
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = Vec::with_capacity(params.numel() * 8);
    let mut manifest = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, t) in params.iter() {
        manifest.push(ManifestEntry { name: name.clone(), offset, shape: t.shape().to_vec() });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.numel();
    }
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    fs::write(&json, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<ParamStore> {
    let (bin, json) = paths(stem);
    if !bin.exists() || !json.exists() {
        return Err(Error::MissingCheckpoint(stem.display().to_string()));
    }
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let manifest: Vec<ManifestEntry> =
        serde_json::from_slice(&fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Config(format!("{}: truncated checkpoint", bin.display())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut store = ParamStore::new();
    for e in manifest {
        let n: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Config(format!("{}: entry {} out of range", bin.display(), e.name)))?;
        store.insert(e.name, Tensor::new(e.shape, slice.to_vec())?);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::from_fn(&[2, 3], |i| (i as f64).sqrt() - 0.1));
        s.insert("b", Tensor::scalar(-1e-300));
        let stem = dir.path().join("ck");
        save_checkpoint(&s, &stem).unwrap();
        assert_eq!(load_checkpoint(&stem).unwrap(), s);
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(&dir.path().join("nope")), Err(Error::MissingCheckpoint(_))));
    }
}
