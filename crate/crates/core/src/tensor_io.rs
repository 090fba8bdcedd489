//! Reading and writing named tensors as safetensors files.
//!
//! Tensors are stored little-endian in their own dtype (`F32` or `F64`).
//! Metadata is written under a single header key so the file bytes do not
//! depend on hash-map iteration order.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::{Dtype, SafeTensors, View};

use crate::error::{Error, Result};

const META_KEY: &str = "camoseg";

struct Raw {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for Raw {
    fn dtype(&self) -> Dtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn to_raw(name: &str, t: &Tensor) -> Result<Raw> {
    let flat = t.flatten_all()?;
    let (dtype, bytes) = match t.dtype() {
        DType::F32 => (
            Dtype::F32,
            flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        other => {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has unsupported dtype {other:?}"
            )))
        }
    };
    Ok(Raw {
        dtype,
        shape: t.dims().to_vec(),
        bytes,
    })
}

/// Serializes tensors (sorted by name) plus string metadata to bytes.
pub fn tensors_to_bytes(tensors: &BTreeMap<String, Tensor>, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let raws = tensors
        .iter()
        .map(|(k, v)| Ok((k.clone(), to_raw(k, v)?)))
        .collect::<Result<Vec<_>>>()?;
    let info = if metadata.is_empty() {
        None
    } else {
        let mut m = HashMap::new();
        m.insert(META_KEY.to_string(), serde_json::to_string(metadata)?);
        Some(m)
    };
    safetensors::serialize(raws, info).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_tensors(path: &Path, tensors: &BTreeMap<String, Tensor>, metadata: &BTreeMap<String, String>) -> Result<()> {
    std::fs::write(path, tensors_to_bytes(tensors, metadata)?)?;
    Ok(())
}

/// Parses safetensors bytes written by [`tensors_to_bytes`].
pub fn tensors_from_bytes(bytes: &[u8]) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, String>)> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let shape = view.shape().to_vec();
        let data = view.data();
        let t = match view.dtype() {
            Dtype::F32 => {
                let v: Vec<f32> = data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, shape, &Device::Cpu)?
            }
            Dtype::F64 => {
                let v: Vec<f64> = data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, shape, &Device::Cpu)?
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has unsupported dtype {other:?}"
                )))
            }
        };
        out.insert(name, t);
    }
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let metadata = match meta.metadata().as_ref().and_then(|m| m.get(META_KEY)) {
        Some(s) => serde_json::from_str(s)?,
        None => BTreeMap::new(),
    };
    Ok((out, metadata))
}

pub fn load_tensors(path: &Path) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path)?;
    tensors_from_bytes(&bytes)
}
