//! Checkpoint container: a directory holding `manifest.json` (one entry per
//! tensor with name, shape, dtype and byte offset) and `weights.bin` with the
//! little-endian f32 data concatenated in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::{ParamStore, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: usize,
}

/// Write `store` to `dir` atomically: both files are written to a sibling
/// staging directory which then replaces `dir`.
pub fn save(store: &ParamStore, dir: &Path) -> Result<()> {
    let mut manifest = Vec::with_capacity(store.len());
    let mut bytes = Vec::with_capacity(store.total_count() * 4);
    for (name, t) in store.iter() {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset: bytes.len(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_dir_atomic(dir, &[(MANIFEST_FILE, &json), (WEIGHTS_FILE, &bytes)])
}

/// Replace `dir` with a directory containing exactly `files`.
pub fn write_dir_atomic(dir: &Path, files: &[(&str, &[u8])]) -> Result<()> {
    write_tree_atomic(dir, |staging| {
        for (name, data) in files {
            let p = staging.join(name);
            fs::write(&p, data).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    })
}

/// Replace `dir` with whatever `build` writes into a fresh staging
/// directory. `dir` is untouched if `build` fails.
pub fn write_tree_atomic(dir: &Path, build: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let stem = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let staging = parent.join(format!(".{stem}.staging-{}", std::process::id()));
    let retired = parent.join(format!(".{stem}.retired-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    if let Err(e) = build(&staging) {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    if dir.exists() {
        fs::rename(dir, &retired).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
    if retired.exists() {
        fs::remove_dir_all(&retired).map_err(|e| Error::io(&retired, e))?;
    }
    Ok(())
}

pub fn load(dir: &Path) -> Result<ParamStore> {
    let mpath: PathBuf = dir.join(MANIFEST_FILE);
    let wpath: PathBuf = dir.join(WEIGHTS_FILE);
    if !mpath.exists() {
        return Err(Error::MissingInput {
            what: "checkpoint manifest".into(),
            path: mpath,
        });
    }
    let manifest: Vec<ManifestEntry> =
        serde_json::from_slice(&fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?)?;
    let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let mut store = ParamStore::new();
    let mut expected_offset = 0;
    for e in manifest {
        if e.dtype != "f32" {
            return Err(Error::Format(format!(
                "{}: unsupported dtype {}",
                e.name, e.dtype
            )));
        }
        if e.byte_offset != expected_offset {
            return Err(Error::Format(format!(
                "{}: byte_offset {} but expected {expected_offset}",
                e.name, e.byte_offset
            )));
        }
        let n: usize = e.shape.iter().product();
        let end = e.byte_offset + 4 * n;
        if end > bytes.len() {
            return Err(Error::Format(format!("{}: weights file truncated", e.name)));
        }
        let data = bytes[e.byte_offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(e.name, Tensor::new(e.shape, data)?)?;
        expected_offset = end;
    }
    if expected_offset != bytes.len() {
        return Err(Error::Format("trailing bytes in weights file".into()));
    }
    Ok(store)
}
