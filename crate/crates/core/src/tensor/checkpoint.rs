//! Single-file parameter checkpoints.
//!
//! Layout: 8-byte magic `NCPPTNSR`, u32 LE format version, u64 LE length
//! of a JSON manifest, the manifest itself, then every tensor's values as
//! little-endian f64 in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor, TensorError};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"NCPPTNSR";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    tensors: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    path: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub meta: serde_json::Value,
}

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Io(e.to_string())
}

pub fn encode_checkpoint(params: &ParamStore, meta: &serde_json::Value) -> Vec<u8> {
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        tensors: params
            .iter()
            .map(|(path, p)| Entry { path: path.clone(), shape: p.value.shape().to_vec(), trainable: p.trainable })
            .collect(),
        meta: meta.clone(),
    };
    let header = serde_json::to_vec(&manifest).expect("manifest serializes");
    let body: usize = params.iter().map(|(_, p)| p.value.len() * 8).sum();
    let mut out = Vec::with_capacity(20 + header.len() + body);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, p) in params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, TensorError> {
    let bad = |m: &str| TensorError::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(header).map_err(|e| TensorError::Checkpoint(format!("manifest: {e}")))?;
    let mut cursor = 20 + hlen;
    let mut params = ParamStore::new();
    for entry in manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes.get(cursor..cursor + n * 8).ok_or_else(|| bad("truncated tensor data"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        params.insert(entry.path, Tensor::new(entry.shape, data)?, entry.trainable);
        cursor += n * 8;
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint { params, meta: manifest.meta })
}

pub fn write_checkpoint(path: &Path, params: &ParamStore, meta: &serde_json::Value) -> Result<(), TensorError> {
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&encode_checkpoint(params, meta)).map_err(io_err)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, TensorError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).map_err(io_err)?.read_to_end(&mut bytes).map_err(io_err)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..40), split in 1usize..5) {
            let mut store = ParamStore::new();
            let n = values.len();
            store.insert("a.weight", Tensor::new(vec![n], values.clone()).unwrap(), true);
            store.insert("b.running_mean", Tensor::full(&[split], 0.25), false);
            let meta = serde_json::json!({"k": "v"});
            let decoded = decode_checkpoint(&encode_checkpoint(&store, &meta)).unwrap();
            prop_assert_eq!(decoded.params, store);
            prop_assert_eq!(decoded.meta, meta);
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(decode_checkpoint(b"hello").is_err());
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[3]), true);
        let bytes = encode_checkpoint(&store, &serde_json::Value::Null);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(decode_checkpoint(&wrong).is_err());
    }
}
