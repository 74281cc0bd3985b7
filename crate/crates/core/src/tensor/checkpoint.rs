//! Weight checkpoints: a JSON manifest of parameter names, shapes and byte
//! offsets into one raw little-endian float blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::array::Tensor;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the first value in the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    /// "f32" (default) or "f64".
    pub dtype: String,
    pub blob: String,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn encode<T: Real, S: Real>(store: &ParamStore<T>) -> (Vec<ParamEntry>, Vec<u8>) {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in store.iter() {
        entries.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for &v in t.data() {
            S::lit(v.as_f64()).write_le(&mut blob);
        }
    }
    (entries, blob)
}

/// Writes `store` into `dir` with the given blob precision.
pub fn save<T: Real>(
    dir: &Path,
    store: &ParamStore<T>,
    wide: bool,
    meta: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (params, blob, dtype) = if wide {
        let (p, b) = encode::<T, f64>(store);
        (p, b, f64::DTYPE)
    } else {
        let (p, b) = encode::<T, f32>(store);
        (p, b, f32::DTYPE)
    };
    let manifest = Manifest {
        dtype: dtype.to_string(),
        blob: BLOB_FILE.to_string(),
        params,
        meta,
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&man_path, e))?;
    fs::write(&man_path, text).map_err(|e| Error::io(&man_path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let man_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&man_path, e))
}

pub fn load<T: Real>(dir: &Path) -> Result<(ParamStore<T>, Manifest)> {
    let manifest = read_manifest(dir)?;
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let width = match manifest.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Contract(format!("unsupported checkpoint dtype {other}"))),
    };
    let mut store = ParamStore::new();
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n * width;
        if end > blob.len() {
            return Err(Error::Contract(format!(
                "parameter {} overruns blob ({} > {} bytes)",
                entry.name,
                end,
                blob.len()
            )));
        }
        let bytes = &blob[entry.offset..end];
        let data = bytes
            .chunks_exact(width)
            .map(|b| {
                if width == 4 {
                    T::lit(f32::read_le(b) as f64)
                } else {
                    T::lit(f64::read_le(b))
                }
            })
            .collect();
        store.insert(entry.name.clone(), Tensor::new(&entry.shape, data)?);
    }
    Ok((store, manifest))
}
