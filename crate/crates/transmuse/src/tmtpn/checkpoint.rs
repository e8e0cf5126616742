//! Binary model checkpoints.
//!
//! Layout: 4-byte magic `TMSE`, 1-byte format version, a little-endian u32
//! JSON header length, the JSON header (config, rng state, tensor manifest),
//! then all tensor payloads as little-endian f32 in manifest order.
//! Parameters are stored at f32 precision, so a save/load/save round trip is
//! byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, TmtpnConfig, TmtpnModel};
use crate::mat::Matrix;

const MAGIC: &[u8; 4] = b"TMSE";
const VERSION: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Byte offset of this tensor's payload, counted from the end of the
    /// header.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: TmtpnConfig,
    rng_state: u64,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &TmtpnModel, path: &Path) -> Result<(), ModelError> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, m) in model.named_params() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            offset: payload.len(),
        });
        for v in m.data() {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let header = Header {
        config: model.config.clone(),
        rng_state: model.rng_state,
        tensors,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| ModelError::Corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(9 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TmtpnModel, ModelError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 9 || &bytes[0..4] != MAGIC {
        return Err(ModelError::BadMagic);
    }
    if bytes[4] != VERSION {
        return Err(ModelError::BadVersion(bytes[4]));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let body_start = 9 + header_len;
    if bytes.len() < body_start {
        return Err(ModelError::Corrupt("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[9..body_start])
        .map_err(|e| ModelError::Corrupt(format!("bad header: {e}")))?;
    let payload = &bytes[body_start..];
    let mut named = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let count = t.rows * t.cols;
        let end = t.offset + count * 4;
        if end > payload.len() {
            return Err(ModelError::Corrupt(format!(
                "truncated payload for tensor {}",
                t.name
            )));
        }
        let data: Vec<f64> = payload[t.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        named.push((t.name.clone(), Matrix::from_vec(t.rows, t.cols, data)));
    }
    TmtpnModel::from_parts(header.config, named, header.rng_state)
}
