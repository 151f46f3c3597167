//! Single-file model checkpoints.
//!
//! Layout:
//!
//! ```text
//! 8 bytes   magic "RVAFMCKP"
//! 8 bytes   manifest length n, u64 little-endian
//! n bytes   JSON manifest: format version, dtype, model config, tensor table
//! rest      payload: raw little-endian tensor data at the listed offsets
//! ```
//!
//! Offsets in the tensor table are relative to the start of the payload.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Result};
use crate::layers::Parameters;
use crate::model::{ModelConfig, ModelParams};
use crate::real::{DType, Real};

pub const MAGIC: &[u8; 8] = b"RVAFMCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: DType,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode<T: Real>(model: &ModelParams<T>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    model.visit("", &mut |name, t| {
        let offset = payload.len() as u64;
        t.data().iter().for_each(|v| v.write_le(&mut payload));
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            offset,
            len: payload.len() as u64 - offset,
        });
    });
    let manifest = Manifest { format_version: FORMAT_VERSION, dtype: T::DTYPE, config: model.config(), tensors };
    let json = serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses the header; returns the manifest and the payload slice.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8]), CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let len_end = MAGIC.len() + 8;
    if bytes.len() < len_end {
        return Err(CheckpointError::Truncated { expected: len_end as u64, found: bytes.len() as u64 });
    }
    let n = u64::from_le_bytes(bytes[MAGIC.len()..len_end].try_into().expect("8 bytes"));
    let json_end = (len_end as u64)
        .checked_add(n)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or(CheckpointError::Truncated { expected: (len_end as u64).saturating_add(n), found: bytes.len() as u64 })?
        as usize;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes[len_end..json_end]).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| CheckpointError::Manifest("missing format_version".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(CheckpointError::VersionMismatch { found: version as u32, expected: FORMAT_VERSION });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    Ok((manifest, &bytes[json_end..]))
}

fn check_offsets(manifest: &Manifest, payload_len: u64) -> Result<(), CheckpointError> {
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.tensors.len());
    let mut needed = 0u64;
    for e in &manifest.tensors {
        let corrupt = |detail: String| CheckpointError::CorruptOffsets { name: e.name.clone(), detail };
        let expect = e.shape.iter().try_fold(e.dtype.size_of() as u64, |acc, &d| acc.checked_mul(d as u64));
        if expect != Some(e.len) {
            return Err(corrupt(format!("length {} for shape {:?} of {}", e.len, e.shape, e.dtype)));
        }
        let end = e.offset.checked_add(e.len).ok_or_else(|| corrupt("offset overflows".into()))?;
        needed = needed.max(end);
        spans.push((e.offset, end, &e.name));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(CheckpointError::CorruptOffsets {
                name: w[1].2.to_string(),
                detail: format!("overlaps {:?}", w[0].2),
            });
        }
    }
    if needed > payload_len {
        return Err(CheckpointError::Truncated { expected: needed, found: payload_len });
    }
    Ok(())
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<ModelParams<T>> {
    let (manifest, payload) = read_manifest(bytes)?;
    if manifest.dtype != T::DTYPE {
        return Err(CheckpointError::DtypeMismatch {
            found: manifest.dtype.to_string(),
            expected: T::DTYPE.to_string(),
        }
        .into());
    }
    if let Some(e) = manifest.tensors.iter().find(|e| e.dtype != manifest.dtype) {
        return Err(CheckpointError::Manifest(format!(
            "tensor {:?} is {}, file is {}",
            e.name, e.dtype, manifest.dtype
        ))
        .into());
    }
    check_offsets(&manifest, payload.len() as u64)?;
    let mut model =
        ModelParams::<T>::init(&manifest.config, 0).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let mut table: HashMap<&str, &TensorEntry> = HashMap::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if table.insert(e.name.as_str(), e).is_some() {
            return Err(CheckpointError::Manifest(format!("duplicate tensor {:?}", e.name)).into());
        }
    }
    let size = T::DTYPE.size_of();
    let mut err: Option<CheckpointError> = None;
    let mut used = 0;
    model.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        let Some(e) = table.get(name.as_str()) else {
            err = Some(CheckpointError::MissingTensor(name));
            return;
        };
        if e.shape != t.shape() {
            err = Some(CheckpointError::Manifest(format!(
                "tensor {name:?} has shape {:?}, config implies {:?}",
                e.shape,
                t.shape()
            )));
            return;
        }
        let start = e.offset as usize;
        let bytes = &payload[start..start + e.len as usize];
        for (dst, chunk) in t.data_mut().iter_mut().zip(bytes.chunks_exact(size)) {
            *dst = T::read_le(chunk);
        }
        used += 1;
    });
    if let Some(e) = err {
        return Err(e.into());
    }
    if used != manifest.tensors.len() {
        return Err(
            CheckpointError::Manifest(format!("{} tensors listed, {used} expected", manifest.tensors.len())).into()
        );
    }
    Ok(model)
}

pub fn save_checkpoint<T: Real>(model: &ModelParams<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ModelParams<T>> {
    decode(&std::fs::read(path)?)
}

/// Manifest of a checkpoint file without loading its tensors.
pub fn peek_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path)?;
    Ok(read_manifest(&bytes).map(|(m, _)| m)?)
}
