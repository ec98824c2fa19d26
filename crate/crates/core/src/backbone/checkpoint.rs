//! Checkpoint files: a plain-text TOML manifest followed by raw arrays.
//!
//! ```text
//! LAYERFUSE-CKPT
//! manifest_bytes 1234
//! <1234 bytes of TOML manifest>
//! <little-endian array data>
//! ```
//!
//! The manifest records the format version, element dtype, the encoder,
//! backbone and strategy configurations, the optimizer step, and one
//! `[[tensor]]` entry per array with its byte offset into the data section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec, ModelState, OptimizerState};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Real};

pub const MAGIC: &str = "LAYERFUSE-CKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorGroup {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub group: TensorGroup,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: u64,
    pub count: u64,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub byte_order: String,
    pub optimizer_step: u64,
    pub spec: ModelSpec,
    pub tensor: Vec<TensorEntry>,
}

/// Serializes a model state to bytes.
pub fn to_bytes<T: Real>(state: &ModelState<T>) -> Result<Vec<u8>> {
    let params = state.model.params();
    let dtype = T::DTYPE.name().to_string();
    let width = T::DTYPE.size() as u64;
    let mut entries = Vec::with_capacity(3 * params.len());
    let mut data = Vec::new();
    let groups: [(TensorGroup, Vec<&[T]>); 3] = [
        (
            TensorGroup::Param,
            params.iter().map(|(_, p)| p.data.as_slice()).collect(),
        ),
        (
            TensorGroup::AdamM,
            state.optimizer.m.iter().map(Vec::as_slice).collect(),
        ),
        (
            TensorGroup::AdamV,
            state.optimizer.v.iter().map(Vec::as_slice).collect(),
        ),
    ];
    for (group, arrays) in groups {
        if arrays.len() != params.len() {
            return Err(Error::input("optimizer state does not match parameter count"));
        }
        for ((_, p), values) in params.iter().zip(arrays) {
            if values.len() != p.data.len() {
                return Err(Error::input(format!(
                    "optimizer moment for {} has wrong length",
                    p.name
                )));
            }
            entries.push(TensorEntry {
                name: p.name.clone(),
                group,
                shape: p.shape.clone(),
                offset: data.len() as u64,
                count: values.len() as u64,
                dtype: dtype.clone(),
            });
            debug_assert_eq!(data.len() as u64, entries.last().unwrap().offset);
            for &v in values {
                v.write_le(&mut data);
            }
            debug_assert_eq!(data.len() as u64 % width, 0);
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype,
        byte_order: "little".into(),
        optimizer_step: state.optimizer.step,
        spec: state.model.spec().clone(),
        tensor: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::input(format!("manifest encoding: {e}")))?;
    let mut out = format!("{MAGIC}\nmanifest_bytes {}\n", text.len()).into_bytes();
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&data);
    Ok(out)
}

/// Parses only the manifest, without touching array data.
pub fn read_manifest(bytes: &[u8], path: &Path) -> Result<(Manifest, usize)> {
    let bad = |reason: String| Error::format(path, reason);
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    let magic = lines.next().unwrap_or_default();
    if magic != MAGIC.as_bytes() {
        return Err(bad("not a checkpoint (bad magic line)".into()));
    }
    let size_line = lines.next().ok_or_else(|| bad("truncated header".into()))?;
    let size_line = std::str::from_utf8(size_line).map_err(|_| bad("header is not UTF-8".into()))?;
    let n: usize = size_line
        .strip_prefix("manifest_bytes ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(format!("bad manifest size line {size_line:?}")))?;
    let header_len = MAGIC.len() + 1 + size_line.len() + 1;
    let end = header_len
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("manifest extends past end of file".into()))?;
    let text = std::str::from_utf8(&bytes[header_len..end]).map_err(|_| bad("manifest is not UTF-8".into()))?;
    let manifest: Manifest = toml::from_str(text).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "format version {} (this build reads {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.byte_order != "little" {
        return Err(bad(format!("unsupported byte order {}", manifest.byte_order)));
    }
    Ok((manifest, end))
}

/// Deserializes a model state; the file's dtype must match `T`.
pub fn from_bytes<T: Real>(bytes: &[u8], path: &Path) -> Result<ModelState<T>> {
    let bad = |reason: String| Error::format(path, reason);
    let (manifest, start) = read_manifest(bytes, path)?;
    if manifest.dtype != T::DTYPE.name() {
        return Err(bad(format!(
            "checkpoint holds {}, expected {}",
            manifest.dtype,
            T::DTYPE.name()
        )));
    }
    let data = &bytes[start..];
    let width = T::DTYPE.size();
    let mut params = ParamSet::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for e in &manifest.tensor {
        if e.dtype != manifest.dtype {
            return Err(bad(format!("tensor {} has dtype {}", e.name, e.dtype)));
        }
        if e.shape.iter().product::<usize>() as u64 != e.count {
            return Err(bad(format!("tensor {} shape/count mismatch", e.name)));
        }
        let lo = usize::try_from(e.offset).map_err(|_| bad("offset overflow".into()))?;
        let hi = (e.count as usize)
            .checked_mul(width)
            .and_then(|len| lo.checked_add(len))
            .filter(|&hi| hi <= data.len())
            .ok_or_else(|| bad(format!("tensor {} extends past end of file", e.name)))?;
        let values: Vec<T> = data[lo..hi].chunks_exact(width).map(T::read_le).collect();
        match e.group {
            TensorGroup::Param => {
                if params.find(&e.name).is_some() {
                    return Err(bad(format!("duplicate tensor {}", e.name)));
                }
                params.add(e.name.clone(), e.shape.clone(), values);
            }
            TensorGroup::AdamM => m.push((e.name.clone(), values)),
            TensorGroup::AdamV => v.push((e.name.clone(), values)),
        }
    }
    let align = |group: Vec<(String, Vec<T>)>, what: &str| -> Result<Vec<Vec<T>>> {
        if group.len() != params.len() {
            return Err(bad(format!(
                "{what}: {} tensors for {} parameters",
                group.len(),
                params.len()
            )));
        }
        group
            .into_iter()
            .zip(params.iter())
            .map(|((name, values), (_, p))| {
                if name != p.name || values.len() != p.data.len() {
                    return Err(bad(format!("{what} entry {name} does not match parameter {}", p.name)));
                }
                Ok(values)
            })
            .collect()
    };
    let m = align(m, "adam_m")?;
    let v = align(v, "adam_v")?;
    let model = Model::from_params(manifest.spec, params).map_err(|e| bad(e.to_string()))?;
    Ok(ModelState {
        model,
        optimizer: OptimizerState {
            step: manifest.optimizer_step,
            m,
            v,
        },
    })
}

pub fn save<T: Real>(state: &ModelState<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<ModelState<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
