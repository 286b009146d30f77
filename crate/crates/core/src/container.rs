//! Named-array files.
//!
//! Weights and generator models are stored in the safetensors layout: an
//! 8-byte little-endian header length, a JSON header mapping each array name
//! to `{dtype, shape, data_offsets}` plus an optional `__metadata__`
//! string map, then the raw little-endian array bytes. Extractor weights use
//! `F32`; generator parameters use `F64` so they round-trip bit-exactly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::graph::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoredType {
    F32,
    F64,
}

#[derive(Debug, Default)]
pub struct NamedArrays {
    pub arrays: IndexMap<String, Tensor>,
    pub metadata: HashMap<String, String>,
}

impl NamedArrays {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.get(name)
    }
}

pub fn decode_arrays(bytes: &[u8]) -> std::result::Result<NamedArrays, String> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| e.to_string())?;
    let metadata = meta.metadata().clone().unwrap_or_default();
    let tensors = SafeTensors::deserialize(bytes).map_err(|e| e.to_string())?;
    let mut named: Vec<(String, TensorView<'_>)> = tensors.tensors();
    named.sort_by(|a, b| a.0.cmp(&b.0));
    let mut arrays = IndexMap::new();
    for (name, view) in named {
        let data = view.data();
        let values: Vec<f64> = match view.dtype() {
            Dtype::F32 => data
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect(),
            Dtype::F64 => data
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect(),
            other => return Err(format!("array {name}: unsupported dtype {other:?}")),
        };
        let array = ArrayD::from_shape_vec(IxDyn(view.shape()), values).map_err(|e| format!("array {name}: {e}"))?;
        arrays.insert(name, array);
    }
    Ok(NamedArrays { arrays, metadata })
}

pub fn encode_arrays(arrays: &[(&str, &Tensor)], stored: StoredType, metadata: &HashMap<String, String>) -> Vec<u8> {
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = arrays
        .iter()
        .map(|(name, t)| {
            let bytes: Vec<u8> = match stored {
                StoredType::F32 => t.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect(),
                StoredType::F64 => t.iter().flat_map(|v| v.to_le_bytes()).collect(),
            };
            (name.to_string(), t.shape().to_vec(), bytes)
        })
        .collect();
    let dtype = match stored {
        StoredType::F32 => Dtype::F32,
        StoredType::F64 => Dtype::F64,
    };
    let views: Vec<(String, TensorView<'_>)> = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            (
                name.clone(),
                TensorView::new(dtype, shape.clone(), bytes).expect("shape matches buffer"),
            )
        })
        .collect();
    let meta = if metadata.is_empty() {
        None
    } else {
        Some(metadata.clone())
    };
    safetensors::serialize(views, &meta).expect("in-memory serialization")
}

pub fn read_arrays(path: &Path) -> Result<NamedArrays> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    decode_arrays(&bytes).map_err(|e| Error::Weights(format!("{}: {e}", path.display())))
}

pub fn write_arrays(
    path: &Path,
    arrays: &[(&str, &Tensor)],
    stored: StoredType,
    metadata: &HashMap<String, String>,
) -> Result<()> {
    fs::write(path, encode_arrays(arrays, stored, metadata))?;
    Ok(())
}
