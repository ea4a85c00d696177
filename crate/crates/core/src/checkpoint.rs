//! Model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic b"CFCK"
//! 4       4     u32 format version (1)
//! 8       8     u64 header length N
//! 16      N     UTF-8 JSON header
//! 16+N    ...   tensor data, f32 little-endian, concatenated in header order
//! ```
//!
//! The header is `{"config": ModelConfig, "tensors": [{"name", "shape",
//! "kind", "offset"}]}` where `offset` counts f32 elements from the start
//! of the data section and `kind` is `"param"` or `"buffer"`.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{EntryKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CFCK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    kind: String,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorMeta>,
}

pub fn to_bytes(config: &ModelConfig, store: &ParamStore) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0;
    for e in store.entries() {
        tensors.push(TensorMeta {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            kind: match e.kind {
                EntryKind::Param => "param",
                EntryKind::Buffer => "buffer",
            }
            .into(),
            offset,
        });
        offset += e.value.len();
    }
    let header = serde_json::to_vec(&Header {
        config: config.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for e in store.entries() {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Rebuilds the model from the stored config and fills its tensors by name.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, ParamStore)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..).ok_or_else(|| bad("truncated header"))?;
    let header_bytes = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(header_bytes)?;
    let data = &body[hlen..];
    if data.len() % 4 != 0 {
        return Err(bad("data section is not a whole number of f32 values"));
    }
    let floats: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();

    let mut store = ParamStore::new();
    // Values are overwritten below; the rng only shapes the skeleton.
    let model = Model::new(&mut store, header.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    if header.tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "config builds {} tensors, checkpoint has {}",
            store.len(),
            header.tensors.len()
        )));
    }
    for meta in &header.tensors {
        let id = store
            .find(&meta.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", meta.name)))?;
        if store.get(id).shape() != meta.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                meta.name,
                meta.shape,
                store.get(id).shape()
            )));
        }
        let n: usize = meta.shape.iter().product();
        let src = floats
            .get(meta.offset..meta.offset + n)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the data section", meta.name)))?;
        *store.get_mut(id) = Tensor::new(&meta.shape, src.to_vec())?;
    }
    Ok((model, store))
}

pub fn save(path: impl AsRef<Path>, config: &ModelConfig, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(config, store)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model, ParamStore)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
