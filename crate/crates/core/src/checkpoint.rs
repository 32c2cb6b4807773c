//! Named-tensor archive.
//!
//! Layout is the safetensors container: an 8-byte little-endian header length,
//! a JSON manifest mapping each name to its dtype, shape and byte range, then
//! the raw little-endian f32 payloads. Free-form metadata is stored as one
//! JSON object under a single manifest key so the header bytes are stable.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

const META_KEY: &str = "psstrnet";

#[derive(Clone, Debug, Default)]
pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

pub fn encode_archive(
    tensors: &BTreeMap<String, Tensor>,
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let mut payloads = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        payloads.push((name.clone(), t.dims().to_vec(), bytes));
    }
    let views = payloads
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.as_str(), v))
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let info = if metadata.is_empty() {
        None
    } else {
        Some(std::iter::once((META_KEY.to_string(), serde_json::to_string(metadata)?)).collect())
    };
    safetensors::serialize(views, info).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn decode_archive(bytes: &[u8]) -> Result<Archive> {
    let (_, header) =
        SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let metadata = match header.metadata().as_ref().and_then(|m| m.get(META_KEY)) {
        Some(json) => serde_json::from_str(json)?,
        None => BTreeMap::new(),
    };
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!(
                "{name}: unsupported dtype {:?}",
                view.dtype()
            )));
        }
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(
            name,
            Tensor::from_vec(values, view.shape(), &Device::Cpu)?,
        );
    }
    Ok(Archive { tensors, metadata })
}

pub fn write_archive(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let bytes = encode_archive(tensors, metadata)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive(&bytes)
}
