//! Checkpoint persistence: a JSON manifest (ordered `{name, shape, offset}`
//! entries plus a string metadata map) next to a single little-endian f64
//! blob. Round trips are bit-exact because values travel as raw IEEE bits.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.f64";

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the blob.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<ManifestEntry>,
    pub total_len: usize,
}

pub fn save(store: &ParamStore, meta: &BTreeMap<String, String>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut entries = Vec::with_capacity(store.len());
    let mut blob: Vec<u8> = Vec::with_capacity(store.num_elements() * 8);
    let mut offset = 0usize;
    for e in store.entries() {
        entries.push(ManifestEntry {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            offset,
            trainable: e.trainable,
        });
        for v in e.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += e.value.len();
    }
    let manifest = Manifest {
        meta: meta.clone(),
        entries,
        total_len: offset,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, blob).map_err(|e| Error::io(blob_path.display().to_string(), e))?;
    Ok(())
}

pub struct Loaded {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor, bool)>,
}

pub fn load(dir: &Path) -> Result<Loaded> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut json = String::new();
    fs::File::open(&manifest_path)
        .and_then(|mut f| f.read_to_string(&mut json).map(|_| ()))
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&json)?;

    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(blob_path.display().to_string(), e))?;
    if blob.len() != manifest.total_len * 8 {
        return Err(Error::Checkpoint(format!(
            "blob {} holds {} bytes, manifest expects {}",
            blob_path.display(),
            blob.len(),
            manifest.total_len * 8
        )));
    }

    let mut tensors = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let start = e.offset * 8;
        let end = start + n * 8;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "entry {} overruns blob ({} > {})",
                e.name,
                end,
                blob.len()
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?, e.trainable));
    }
    Ok(Loaded {
        meta: manifest.meta,
        tensors,
    })
}

/// Copy loaded tensors into a freshly constructed store, matching by name.
/// Every store entry must be present in the checkpoint with the same shape.
pub fn apply(loaded: &Loaded, store: &mut ParamStore) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let found = loaded
            .tensors
            .iter()
            .find(|(n, _, _)| *n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        if found.1.shape() != store.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                found.1.shape(),
                store.get(id).shape()
            )));
        }
        store.set(id, found.1.clone())?;
    }
    Ok(())
}

/// Convenience for writing CSV logs deterministically.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    let mut f =
        fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(f, "{header}").map_err(|e| Error::io(path.display().to_string(), e))?;
    for row in rows {
        writeln!(f, "{row}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}
