//! Binary checkpoints: magic, version, JSON header, then raw little-endian
//! `f32` parameter data in header order.
//!
//! Writes go to a temporary sibling file that is renamed into place, so a
//! crash never leaves a truncated checkpoint behind.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Seq2Seq};
use crate::adapters::{AdapterBank, AdapterLayer};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"AFCK";
const VERSION: u32 = 1;

/// Training bookkeeping stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub updates: usize,
    pub best_val_nll: Option<f64>,
    pub seed: u64,
    /// Free-form provenance, e.g. the checkpoint this stage started from.
    #[serde(default)]
    pub parent: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<ParamEntry>,
    adapters: Vec<AdapterLayer>,
    meta: CheckpointMeta,
}

pub fn save(path: &Path, model: &Seq2Seq<f32>, meta: &CheckpointMeta) -> Result<()> {
    let store = model.store();
    let header = Header {
        config: model.config().clone(),
        params: store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                group: p.group.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
        adapters: model.adapters().iter().cloned().collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * store.iter().map(|(_, p)| p.value.numel()).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, p) in store.iter() {
        for x in p.value.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Seq2Seq<f32>, CheckpointMeta)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut data = &bytes[16 + hlen..];
    let mut store = ParamStore::new();
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        if data.len() < 4 * n {
            return Err(bad(&format!("truncated data for {}", e.name)));
        }
        let values = data[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        data = &data[4 * n..];
        let id = store.add(e.name.clone(), e.group.clone(), Tensor::new(e.shape.clone(), values)?);
        store.get_mut(id).trainable = e.trainable;
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after parameter data"));
    }
    let mut bank = AdapterBank::default();
    for a in header.adapters {
        bank.insert(a)?;
    }
    let model = Seq2Seq::from_parts(header.config, store, bank)?;
    Ok((model, header.meta))
}

/// Loads a checkpoint and insists its model shape equals `expected`.
pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<(Seq2Seq<f32>, CheckpointMeta)> {
    let (m, meta) = load(path)?;
    if m.config() != expected {
        return Err(Error::Checkpoint(format!(
            "{} holds a different model configuration",
            path.display()
        )));
    }
    Ok((m, meta))
}
