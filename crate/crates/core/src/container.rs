//! Named-array container files.
//!
//! Every artifact the toolkit persists (Gram sets, model checkpoints, GMMs,
//! backbone weights) is a safetensors file: a set of named row-major arrays
//! plus a flat string-to-string metadata record. Values are held in memory as
//! `f64` and written either as `F32` or `F64` per array.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::{Dtype, SafeTensors};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Default)]
pub struct Container {
    arrays: BTreeMap<String, (Precision, ArrayD<f64>)>,
    metadata: BTreeMap<String, String>,
}

/// Rewrites the JSON header with sorted keys so equal containers serialize to
/// equal bytes.
fn canonical_header(bytes: Vec<u8>) -> Result<Vec<u8>> {
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("length prefix")) as usize;
    let header: serde_json::Value =
        serde_json::from_slice(&bytes[8..8 + n]).map_err(|e| Error::Format(e.to_string()))?;
    let mut text = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    while text.len() % 8 != 0 {
        text.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + text.len() + bytes.len() - 8 - n);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[8 + n..]);
    Ok(out)
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, precision: Precision, array: ArrayD<f64>) {
        self.arrays.insert(name.into(), (precision, array));
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.arrays
            .get(name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::MissingArray(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Stores `value` as its JSON encoding.
    pub fn set_meta_json<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string(value).map_err(|e| Error::Format(e.to_string()))?;
        self.metadata.insert(key.to_string(), text);
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("missing metadata key '{key}'")))
    }

    pub fn meta_json<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        serde_json::from_str(self.meta(key)?)
            .map_err(|e| Error::Format(format!("metadata '{key}': {e}")))
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let buffers: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = self
            .arrays
            .iter()
            .map(|(name, (precision, array))| {
                let (dtype, bytes) = match precision {
                    Precision::F32 => (
                        Dtype::F32,
                        array
                            .iter()
                            .flat_map(|&v| (v as f32).to_le_bytes())
                            .collect::<Vec<u8>>(),
                    ),
                    Precision::F64 => (
                        Dtype::F64,
                        array.iter().flat_map(|v| v.to_le_bytes()).collect(),
                    ),
                };
                (name.clone(), dtype, array.shape().to_vec(), bytes)
            })
            .collect();
        let views = buffers
            .iter()
            .map(|(name, dtype, shape, bytes)| {
                safetensors::tensor::TensorView::new(*dtype, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Format(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Format(e.to_string()))?;
        canonical_header(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) =
            SafeTensors::read_metadata(bytes).map_err(|e| Error::Format(e.to_string()))?;
        let tensors = SafeTensors::deserialize(bytes).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Container::new();
        if let Some(meta) = header.metadata() {
            out.metadata = meta.clone().into_iter().collect();
        }
        for (name, view) in tensors.tensors() {
            let raw = view.data();
            let (precision, values): (Precision, Vec<f64>) = match view.dtype() {
                Dtype::F32 => (
                    Precision::F32,
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                        .collect(),
                ),
                Dtype::F64 => (
                    Precision::F64,
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect(),
                ),
                other => {
                    return Err(Error::Format(format!(
                        "array '{name}' has unsupported dtype {other:?}"
                    )))
                }
            };
            let array = ArrayD::from_shape_vec(IxDyn(view.shape()), values)
                .map_err(|e| Error::Format(e.to_string()))?;
            out.arrays.insert(name, (precision, array));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
