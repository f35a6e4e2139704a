//! Weight checkpoints: one little-endian `f32` blob plus a JSON manifest of
//! `{name, shape, offset}` entries (offsets in bytes).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NashError, Result};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(store: &ParamStore) -> (Vec<u8>, CheckpointManifest) {
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for (_, name, t) in store.iter() {
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape.clone(), offset: blob.len() as u64 });
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    (blob, CheckpointManifest { schema_version: CHECKPOINT_SCHEMA_VERSION, tensors })
}

/// Overwrites the values in `store` from `blob`; names and shapes must match in order.
pub fn decode_into(store: &mut ParamStore, blob: &[u8], manifest: &CheckpointManifest) -> Result<()> {
    if manifest.tensors.len() != store.len() {
        return Err(NashError::invalid(format!(
            "checkpoint has {} tensors, model expects {}",
            manifest.tensors.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.iter().map(|(id, name, t)| (id, name.to_string(), t.shape.clone())).collect();
    for (entry, (id, name, shape)) in manifest.tensors.iter().zip(ids) {
        if entry.name != name || entry.shape != shape {
            return Err(NashError::invalid(format!(
                "checkpoint entry {}{:?} does not match model tensor {name}{shape:?}",
                entry.name, entry.shape
            )));
        }
        let n: usize = shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * n;
        if end > blob.len() {
            return Err(NashError::Format { offset: entry.offset, message: format!("tensor {name} runs past the blob end") });
        }
        let data = blob[start..end].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let t = store.get_mut(id);
        *t = Tensor::new(shape, data)?.with_grad();
    }
    Ok(())
}

pub fn save(dir: &Path, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| NashError::io(dir, e))?;
    let (blob, manifest) = encode(store);
    let wp = dir.join(WEIGHTS_FILE);
    fs::write(&wp, blob).map_err(|e| NashError::io(&wp, e))?;
    let mp = dir.join(MANIFEST_FILE);
    fs::write(&mp, serde_json::to_vec_pretty(&manifest)?).map_err(|e| NashError::io(&mp, e))?;
    Ok(())
}

pub fn load_into(dir: &Path, store: &mut ParamStore) -> Result<()> {
    let mp = dir.join(MANIFEST_FILE);
    let manifest: CheckpointManifest =
        serde_json::from_slice(&fs::read(&mp).map_err(|e| NashError::io(&mp, e))?)?;
    let wp = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&wp).map_err(|e| NashError::io(&wp, e))?;
    decode_into(store, &blob, &manifest)
}
