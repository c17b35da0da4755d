use std::io::{Read, Write};
use std::path::Path;

use pace_nn::Tensor;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, PaceModel};
use crate::dataset::Normalizer;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PACE0001";

/// Location of one tensor in the payload; offsets count from the first
/// payload byte.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    seed: u64,
    normalizer: Option<Normalizer>,
    columns: Vec<usize>,
    tensors: Vec<TensorEntry>,
}

/// A model with the preprocessing needed to feed it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PaceModel,
    /// Statistics applied to the selected feature columns.
    pub normalizer: Option<Normalizer>,
    /// Columns of the full feature table the model reads, in input order.
    pub columns: Vec<usize>,
}

/// `magic | u32 LE metadata length | JSON metadata | LE f32 payloads`.
pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    let model = &ckpt.model;
    let mut offset = 0u64;
    let tensors = model
        .names()
        .iter()
        .zip(model.tensors())
        .map(|(name, t)| {
            let length = 4 * t.len() as u64;
            let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset, length };
            offset += length;
            e
        })
        .collect();
    let meta = Metadata {
        config: model.config().clone(),
        seed: model.seed(),
        normalizer: ckpt.normalizer.clone(),
        columns: ckpt.columns.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&meta)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("metadata exceeds 4 GiB".into()))?;
    let mut buf = Vec::with_capacity(12 + json.len() + offset as usize);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(&json);
    for t in model.tensors() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a PACE0001 checkpoint".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes")) as usize;
    let json = bytes.get(12..12 + len).ok_or_else(|| Error::Checkpoint("truncated metadata".into()))?;
    let meta: Metadata = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    let payload = &bytes[12 + len..];
    let mut named = Vec::with_capacity(meta.tensors.len());
    let mut expected_offset = 0u64;
    for e in &meta.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset || e.length != 4 * n as u64 {
            return Err(Error::Checkpoint(format!("tensor `{}` has an inconsistent manifest entry", e.name)));
        }
        let raw = payload
            .get(e.offset as usize..(e.offset + e.length) as usize)
            .ok_or_else(|| Error::Checkpoint(format!("payload of `{}` is truncated", e.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
        named.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        expected_offset += e.length;
    }
    if expected_offset as usize != payload.len() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    let model = PaceModel::from_tensors(meta.config, meta.seed, named)?;
    Ok(Checkpoint { model, normalizer: meta.normalizer, columns: meta.columns })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ckpt)?;
    std::fs::write(path, buf).map_err(Error::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(Error::io(path))?;
    read_checkpoint(std::io::BufReader::new(file))
}
