//! Checkpoint persistence.
//!
//! Layout: an 8-byte little-endian `u64` giving the byte length of the JSON
//! manifest, the manifest itself, then a flat blob of every parameter's
//! `f64` values in little-endian byte order. The manifest carries the format
//! version, the model kind, a full config snapshot, the fitted noise prior
//! and normalization constants, and a name → (offset, shape) index into the
//! blob. Raw bytes (not JSON numbers) make the parameter round trip
//! bit-exact by construction; the manifest's own floats survive because the
//! JSON layer is configured for lossless `f64` round trips.
//!
//! Writes go to a sibling temporary file first and are renamed into place,
//! so a crash never leaves a half-written checkpoint at the target path.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Config;
use crate::diffkit::{DiffError, ParamStore, Tensor};
use crate::gmnprior::{GaussianMixtureNoise, NormalizationConstants};
use crate::model::{ModelKind, PlannerModel};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format version {got} (this build reads version {FORMAT_VERSION})")]
    BadVersion { got: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("{0}")]
    Diff(#[from] DiffError),
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    /// Offset into the blob, in f64 elements (not bytes).
    offset: usize,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: ModelKind,
    config: Config,
    gmn: GaussianMixtureNoise,
    normalization: NormalizationConstants,
    params: Vec<ParamEntry>,
}

/// Serialize a model to bytes (prefix + manifest + parameter blob).
fn to_bytes(model: &PlannerModel) -> Result<Vec<u8>, CheckpointError> {
    let mut params = Vec::with_capacity(model.store.len());
    let mut blob: Vec<u8> = Vec::with_capacity(model.store.num_scalars() * 8);
    let mut offset = 0usize;
    for (name, tensor) in model.store.iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            offset,
            shape: tensor.shape().to_vec(),
        });
        for &v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += tensor.len();
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: model.kind,
        config: model.config.clone(),
        gmn: model.gmn.clone(),
        normalization: model.norm.clone(),
        params,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(8 + manifest_bytes.len() + blob.len());
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Write atomically: serialize, write a sibling `.tmp` file, sync, rename.
pub fn save_checkpoint(path: &Path, model: &PlannerModel) -> Result<(), CheckpointError> {
    let bytes = to_bytes(model)?;
    let tmp = sibling_tmp_path(path);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn sibling_tmp_path(path: &Path) -> std::path::PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "checkpoint".into());
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn load_checkpoint(path: &Path) -> Result<PlannerModel, CheckpointError> {
    let mut f = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

fn from_bytes(bytes: &[u8]) -> Result<PlannerModel, CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Corrupt(
            "shorter than the length prefix".into(),
        ));
    }
    let manifest_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let manifest_end = 8usize
        .checked_add(manifest_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::Corrupt("manifest length exceeds file size".into()))?;

    // Peek at the version before strict manifest parsing so future layouts
    // still produce the "unsupported version" diagnostic.
    #[derive(Deserialize)]
    struct VersionOnly {
        format_version: u32,
    }
    let v: VersionOnly = serde_json::from_slice(&bytes[8..manifest_end])?;
    if v.format_version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion {
            got: v.format_version,
        });
    }

    let manifest: Manifest = serde_json::from_slice(&bytes[8..manifest_end])?;
    let blob = &bytes[manifest_end..];
    if blob.len() % 8 != 0 {
        return Err(CheckpointError::Corrupt(
            "parameter blob is not a whole number of f64 values".into(),
        ));
    }
    let total: usize = blob.len() / 8;

    let mut store = ParamStore::new();
    for entry in &manifest.params {
        let numel: usize = entry.shape.iter().product();
        let end = entry
            .offset
            .checked_add(numel)
            .filter(|&e| e <= total)
            .ok_or_else(|| {
                CheckpointError::Corrupt(format!(
                    "parameter {} points past the end of the blob",
                    entry.name
                ))
            })?;
        let data: Vec<f64> = (entry.offset..end)
            .map(|i| f64::from_le_bytes(blob[i * 8..(i + 1) * 8].try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data)?;
        store.insert(&entry.name, tensor)?;
    }
    if store.num_scalars() != total {
        return Err(CheckpointError::Corrupt(format!(
            "blob holds {total} values but the manifest indexes {}",
            store.num_scalars()
        )));
    }

    Ok(PlannerModel::attach(
        manifest.kind,
        manifest.config,
        manifest.gmn,
        manifest.normalization,
        store,
    ))
}
