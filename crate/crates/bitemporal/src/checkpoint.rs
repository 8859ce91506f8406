//! Self-describing checkpoint archive.
//!
//! Layout: magic `BTCK`, format version (u32 LE), header length (u64 LE),
//! a JSON header with the model config, vocabulary and parameter table,
//! then every parameter's values as f64 LE in table order.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use bitemporal_core::model::{Model, ModelConfig};
use bitemporal_core::vocab::Vocabulary;
use serde::{Deserialize, Serialize};

use crate::error::{IoError, IoResult};

pub const MAGIC: &[u8; 4] = b"BTCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub vocab_tokens: Vec<String>,
    pub vocab_min_freq: usize,
    pub params: Vec<ParamEntry>,
    /// Free-form provenance (epoch, losses, run config).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, model: &Model, vocab: &Vocabulary, meta: serde_json::Value) -> IoResult<()> {
    let header = CheckpointHeader {
        model: model.config.clone(),
        vocab_tokens: vocab.tokens().to_vec(),
        vocab_min_freq: vocab.min_freq(),
        params: model
            .params
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                trainable: p.trainable,
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header).map_err(|e| IoError::format(path, e.to_string()))?;
    let file = fs::File::create(path).map_err(|e| IoError::file(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| IoError::file(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for (_, p) in model.params.iter() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
    pub header: CheckpointHeader,
}

pub fn load_checkpoint(path: &Path) -> IoResult<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| IoError::file(path, e))?;
    let truncated = || IoError::format(path, "truncated checkpoint");
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(IoError::format(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(IoError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(truncated)?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| IoError::format(path, e.to_string()))?;
    let vocab = Vocabulary::from_tokens(header.vocab_tokens.iter().cloned())?.with_min_freq(header.vocab_min_freq);
    let mut model = Model::new(header.model.clone(), 0)?;
    if model.params.len() != header.params.len() {
        return Err(IoError::format(
            path,
            format!(
                "checkpoint has {} parameters, model expects {}",
                header.params.len(),
                model.params.len()
            ),
        ));
    }
    let mut offset = 16 + hlen;
    let ids: Vec<_> = model.params.ids().collect();
    for (id, entry) in ids.into_iter().zip(&header.params) {
        let p = model.params.param(id);
        if p.name != entry.name || p.value.shape() != (entry.rows, entry.cols) {
            return Err(IoError::format(
                path,
                format!(
                    "parameter {} {:?} does not match model parameter {} {:?}",
                    entry.name,
                    (entry.rows, entry.cols),
                    p.name,
                    p.value.shape()
                ),
            ));
        }
        let n = entry.rows * entry.cols;
        let raw = bytes.get(offset..offset + 8 * n).ok_or_else(truncated)?;
        for (dst, chunk) in model.params.get_mut(id).data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        model.params.set_trainable(id, entry.trainable);
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(IoError::format(path, "trailing bytes after parameter data"));
    }
    Ok(Checkpoint { model, vocab, header })
}
