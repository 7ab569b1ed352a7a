//! Model file layout:
//!
//! ```text
//! magic "FSLMMDN1" | u32 version | u64 descriptor length | descriptor JSON
//! | u64 value count | f64 values | 32-byte SHA-256 of everything before
//! ```
//!
//! Values are the standardization constants followed by the network
//! weights. Integers and floats are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{MdnArchitecture, MdnModel, Standardization};
use crate::error::{FslmError, Result};
use crate::io::write_atomic;

pub const MODEL_MAGIC: &[u8; 8] = b"FSLMMDN1";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    architecture: MdnArchitecture,
    param_names: Vec<String>,
    feature_names: Vec<String>,
    meta: serde_json::Value,
}

pub fn encode_model(model: &MdnModel) -> Result<Vec<u8>> {
    let desc = Descriptor {
        architecture: model.arch.clone(),
        param_names: model.param_names.clone(),
        feature_names: model.feature_names.clone(),
        meta: model.meta.clone(),
    };
    let json = serde_json::to_vec(&desc)?;
    let values: Vec<f64> = model.standardization.values().copied().chain(model.weights()).collect();
    let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + 8 + 8 * values.len() + 32);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in &values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_model(path: &Path, bytes: &[u8]) -> Result<MdnModel> {
    let format = |reason: &str| FslmError::Format { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 8 + 4 + 8 + 8 + 32 {
        return Err(FslmError::Checksum { path: path.to_path_buf() });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(FslmError::Checksum { path: path.to_path_buf() });
    }
    if &body[..8] != MODEL_MAGIC {
        return Err(format("not a model file"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(FslmError::Version { path: path.to_path_buf(), found: version, expected: MODEL_VERSION });
    }
    let json_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let json_end = 20usize.checked_add(json_len).filter(|e| *e + 8 <= body.len()).ok_or_else(|| format("descriptor overruns file"))?;
    let desc: Descriptor = serde_json::from_slice(&body[20..json_end])?;
    desc.architecture.validate()?;
    let count = u64::from_le_bytes(body[json_end..json_end + 8].try_into().unwrap()) as usize;
    let values_bytes = &body[json_end + 8..];
    if values_bytes.len() != count * 8 {
        return Err(format("value block length mismatch"));
    }
    let values: Vec<f64> = values_bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();

    let arch = desc.architecture;
    let (din, dout) = (arch.input_dim, arch.output_dim);
    if desc.param_names.len() != din || desc.feature_names.len() != dout {
        return Err(format("name lists do not match architecture"));
    }
    let mut model = MdnModel::new(arch, desc.param_names, desc.feature_names, 0)?;
    let n_std = 2 * din + 2 * dout;
    if values.len() != n_std + model.n_weights() {
        return Err(format("weight count does not match architecture"));
    }
    let s = Standardization {
        theta_mean: values[..din].to_vec(),
        theta_scale: values[din..2 * din].to_vec(),
        x_mean: values[2 * din..2 * din + dout].to_vec(),
        x_scale: values[2 * din + dout..n_std].to_vec(),
    };
    model.set_standardization(s)?;
    model.set_weights(&values[n_std..]);
    model.meta = desc.meta;
    Ok(model)
}

pub fn save_model(model: &MdnModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode_model(model)?)
}

pub fn load_model(path: &Path) -> Result<MdnModel> {
    let bytes = std::fs::read(path)?;
    decode_model(path, &bytes)
}
