//! Checkpoint files.
//!
//! Layout: the 8-byte magic `SGCKPT\r\n`, a little-endian `u32` header length,
//! a JSON header, then every parameter as a little-endian `f64` in canonical
//! order (conv1, conv2, conv3; weights before biases).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::sha256_hex;
use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::metrics::write_bytes;
use crate::model::ModelParams;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGCKPT\r\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerShape {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub head_kind: HeadKind,
    pub seed: u64,
    pub num_classes: usize,
    pub out_channels: usize,
    pub layers: Vec<LayerShape>,
    pub param_count: usize,
    pub blob_sha256: String,
}

pub fn write_checkpoint(params: &ModelParams, seed: u64, config_hash: &str) -> Vec<u8> {
    let blob: Vec<u8> = params.iter().flat_map(|v| v.to_le_bytes()).collect();
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        tool_version: crate::TOOL_VERSION.to_string(),
        config_hash: config_hash.to_string(),
        head_kind: params.head,
        seed,
        num_classes: params.num_classes,
        out_channels: params.raw_channels(),
        layers: ["conv1", "conv2", "conv3"]
            .iter()
            .zip(params.layers())
            .map(|(name, l)| LayerShape {
                name: (*name).to_string(),
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                kernel: l.kernel,
            })
            .collect(),
        param_count: params.param_count(),
        blob_sha256: sha256_hex(&blob),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

fn corrupt(msg: impl std::fmt::Display) -> Error {
    Error::Format(format!(
        "invalid checkpoint (expected format version {CHECKPOINT_VERSION}): {msg}"
    ))
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, ModelParams)> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing magic bytes"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(12..12 + len).ok_or_else(|| corrupt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(corrupt)?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("found format version {}", header.format_version)));
    }
    let mut params = ModelParams::zeros(header.head_kind, header.num_classes)?;
    if params.param_count() != header.param_count || params.raw_channels() != header.out_channels {
        return Err(corrupt("parameter layout does not match the head kind"));
    }
    let blob = &bytes[12 + len..];
    if blob.len() != header.param_count * 8 {
        return Err(corrupt(format!(
            "expected {} parameter bytes, found {}",
            header.param_count * 8,
            blob.len()
        )));
    }
    if sha256_hex(blob) != header.blob_sha256 {
        return Err(corrupt("parameter checksum mismatch"));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    params.set_flat(&values)?;
    if !params.is_finite() {
        return Err(corrupt("non-finite parameter"));
    }
    Ok((header, params))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, seed: u64, config_hash: &str) -> Result<()> {
    write_bytes(path, &write_checkpoint(params, seed, config_hash))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelParams)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
