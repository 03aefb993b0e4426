//! Weight files: an 8-byte little-endian header length, a JSON header (config,
//! fingerprint, tensor manifest) and the parameters as little-endian f32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::TensorInfo;
use super::{DenoiserConfig, Model};
use crate::error::{Error, Result};

const FORMAT: &str = "matdiff-weights-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    config: DenoiserConfig,
    fingerprint: String,
    parameters: usize,
    tensors: Vec<TensorInfo>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the canonical JSON of the configuration.
pub fn config_fingerprint(config: &DenoiserConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex(&Sha256::digest(json))
}

/// SHA-256 of the parameter bytes.
pub fn weights_checksum(model: &Model) -> String {
    let mut h = Sha256::new();
    for v in &model.params {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

pub fn save_weights(model: &Model, path: &Path) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        config: model.config.clone(),
        fingerprint: config_fingerprint(&model.config),
        parameters: model.params.len(),
        tensors: model.tensors.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    let mut bytes = Vec::with_capacity(8 + json.len() + 4 * model.params.len());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in &model.params {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads weights; when `expected` is given its fingerprint must match the file's.
pub fn load_weights(path: &Path, expected: Option<&DenoiserConfig>) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |m: &str| Error::MalformedFile {
        path: path.to_path_buf(),
        line: 0,
        message: m.to_string(),
    };
    if bytes.len() < 8 {
        return Err(malformed("truncated header"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 8 + hlen {
        return Err(malformed("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + hlen]).map_err(|e| Error::json(path, e))?;
    if header.format != FORMAT {
        return Err(malformed(&format!("unknown format {}", header.format)));
    }
    let fp = config_fingerprint(&header.config);
    if fp != header.fingerprint {
        return Err(Error::IncompatibleWeights("stored fingerprint does not match stored config".into()));
    }
    if let Some(cfg) = expected {
        if config_fingerprint(cfg) != fp {
            return Err(Error::IncompatibleWeights(format!(
                "weights were trained for {:?}/{:?} channels but {:?}/{:?} was requested",
                header.config.dims, header.config.block_channels, cfg.dims, cfg.block_channels
            )));
        }
    }
    let blob = &bytes[8 + hlen..];
    if blob.len() != 4 * header.parameters {
        return Err(malformed(&format!(
            "expected {} parameter bytes, found {}",
            4 * header.parameters,
            blob.len()
        )));
    }
    let params: Vec<f32> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if params.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("weights in {}", path.display())));
    }
    let model = Model::from_params(header.config, params)?;
    if model.tensors != header.tensors {
        return Err(Error::IncompatibleWeights("tensor manifest does not match the architecture".into()));
    }
    Ok(model)
}
