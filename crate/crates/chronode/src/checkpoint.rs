//! Checkpoint persistence: a versioned JSON manifest listing every parameter
//! tensor's name, shape, dtype, and byte offset, next to one binary payload
//! of raw little-endian IEEE-754 values.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::tensor::{Precision, Tensor};

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_SUFFIX: &str = "manifest.json";
const PAYLOAD_SUFFIX: &str = "weights.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub byte_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub params: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct CheckpointPaths {
    pub manifest: PathBuf,
    pub payload: PathBuf,
}

/// `dir/name.{manifest.json, weights.bin}`.
pub fn checkpoint_paths(dir: &Path, name: &str) -> CheckpointPaths {
    CheckpointPaths {
        manifest: dir.join(format!("{name}.{MANIFEST_SUFFIX}")),
        payload: dir.join(format!("{name}.{PAYLOAD_SUFFIX}")),
    }
}

fn dtype_of(precision: Precision) -> (&'static str, usize) {
    match precision {
        Precision::F32 => ("f32", 4),
        Precision::F64 => ("f64", 8),
    }
}

/// Write all named parameters. Load of the result is bit-identical in f64
/// mode.
pub fn checkpoint_save(
    dir: &Path,
    name: &str,
    params: &[(String, &Tensor)],
    precision: Precision,
) -> Result<CheckpointPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = checkpoint_paths(dir, name);
    let (dtype, width) = dtype_of(precision);

    let mut entries = Vec::with_capacity(params.len());
    let mut payload: Vec<u8> = Vec::new();
    for (pname, tensor) in params {
        let offset = payload.len();
        match precision {
            Precision::F64 => {
                for v in tensor.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
            Precision::F32 => {
                for v in tensor.data() {
                    payload.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
        entries.push(ManifestEntry {
            name: pname.clone(),
            shape: tensor.shape().to_vec(),
            dtype: dtype.to_string(),
            offset,
            byte_len: tensor.len() * width,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        params: entries,
    };
    std::fs::write(&paths.manifest, serde_json::to_string_pretty(&manifest)?)?;
    let mut f = std::fs::File::create(&paths.payload)?;
    f.write_all(&payload)?;
    Ok(paths)
}

/// Load a checkpoint into an ordered name -> tensor map, verifying the
/// manifest version, entry uniqueness, and payload length.
pub fn checkpoint_load(dir: &Path, name: &str) -> Result<BTreeMap<String, Tensor>> {
    let paths = checkpoint_paths(dir, name);
    let manifest_text = std::fs::read_to_string(&paths.manifest)
        .map_err(|e| Error::Checkpoint(format!("cannot read manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::Checkpoint(format!("malformed manifest: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "manifest version {} unsupported (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for e in &manifest.params {
        if !seen.insert(&e.name) {
            return Err(Error::Checkpoint(format!(
                "parameter {} listed more than once",
                e.name
            )));
        }
    }

    let mut payload = Vec::new();
    std::fs::File::open(&paths.payload)
        .map_err(|e| Error::Checkpoint(format!("cannot read payload: {e}")))?
        .read_to_end(&mut payload)?;

    let mut out = BTreeMap::new();
    for e in &manifest.params {
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => {
                return Err(Error::Checkpoint(format!("unknown dtype {other}")));
            }
        };
        let count: usize = e.shape.iter().product();
        if e.byte_len != count * width {
            return Err(Error::Checkpoint(format!(
                "entry {} byte length {} does not match shape {:?}",
                e.name, e.byte_len, e.shape
            )));
        }
        let end = e.offset + e.byte_len;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "payload truncated: {} needs bytes {}..{} but file has {}",
                e.name,
                e.offset,
                end,
                payload.len()
            )));
        }
        let bytes = &payload[e.offset..end];
        let data: Vec<f64> = match width {
            4 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            _ => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        out.insert(e.name.clone(), Tensor::from_vec(e.shape.clone(), data)?);
    }
    Ok(out)
}

/// Save every parameter of a bundle.
pub fn save_bundle(
    dir: &Path,
    name: &str,
    bundle: &ModelBundle,
    precision: Precision,
) -> Result<CheckpointPaths> {
    let params: Vec<(String, &Tensor)> = bundle.named_params();
    checkpoint_save(dir, name, &params, precision)
}

/// Load checkpointed values into an existing bundle. Every loaded tensor
/// must match a parameter of the same name and shape; parameters absent from
/// the checkpoint (for example a fresh classifier) keep their current
/// values. Returns the names that were loaded.
pub fn load_into_bundle(
    dir: &Path,
    name: &str,
    bundle: &mut ModelBundle,
) -> Result<Vec<String>> {
    let loaded = checkpoint_load(dir, name)?;
    let mut matched = Vec::new();
    let mut mismatches = Vec::new();
    {
        let mut params = bundle.named_params_mut();
        let mut by_name: BTreeMap<&str, &mut Tensor> = params
            .iter_mut()
            .map(|(n, t)| (n.as_str(), &mut **t))
            .collect();
        for (pname, tensor) in &loaded {
            match by_name.get_mut(pname.as_str()) {
                Some(slot) => {
                    if slot.shape() != tensor.shape() {
                        mismatches.push(format!(
                            "{pname}: checkpoint {:?} vs model {:?}",
                            tensor.shape(),
                            slot.shape()
                        ));
                    } else {
                        **slot = tensor.clone();
                        matched.push(pname.clone());
                    }
                }
                None => mismatches.push(format!("{pname}: not present in model")),
            }
        }
    }
    if !mismatches.is_empty() {
        return Err(Error::CheckpointMismatch(mismatches.join("; ")));
    }
    Ok(matched)
}
