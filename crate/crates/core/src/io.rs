//! Binary matrix files with a JSON sidecar.
//!
//! Layout of the binary file (all little-endian):
//!
//! ```text
//! 0   8 bytes   magic "FSLMMAT1"
//! 8   u64       rows
//! 16  u64       cols
//! 24  f64 × rows·cols, row-major
//! ```
//!
//! The sidecar lives next to it as `<path>.json` and carries the column
//! names plus free-form metadata (producer, seeds, sampler diagnostics).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{FslmError, Result};

pub const MATRIX_MAGIC: &[u8; 8] = b"FSLMMAT1";
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format: String,
    pub version: u32,
    pub rows: usize,
    pub cols: usize,
    pub columns: Vec<String>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub data: Array2<f64>,
    pub columns: Vec<String>,
    pub meta: serde_json::Value,
}

impl LabeledMatrix {
    pub fn new(data: Array2<f64>, columns: Vec<String>) -> Self {
        LabeledMatrix { data, columns, meta: serde_json::Value::Null }
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_matrix(data: &Array2<f64>) -> Vec<u8> {
    let (rows, cols) = data.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * 8);
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for v in data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(path: &Path, bytes: &[u8]) -> Result<Array2<f64>> {
    let bad = |reason: &str| FslmError::Format { path: path.to_owned(), reason: reason.to_owned() };
    if bytes.len() < HEADER_LEN {
        return Err(bad("truncated header"));
    }
    if &bytes[..8] != MATRIX_MAGIC {
        return Err(bad("bad magic"));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| bad("dimension overflow"))?;
    if bytes.len() != expected {
        return Err(bad("payload length does not match dimensions"));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("shape checked above"))
}

pub fn write_matrix(path: &Path, m: &LabeledMatrix) -> Result<()> {
    let (rows, cols) = m.data.dim();
    if m.columns.len() != cols {
        return Err(FslmError::Dimension { expected: cols, got: m.columns.len() });
    }
    write_atomic(path, &encode_matrix(&m.data))?;
    let sidecar = Sidecar {
        format: "fslm-matrix".into(),
        version: 1,
        rows,
        cols,
        columns: m.columns.clone(),
        meta: m.meta.clone(),
    };
    write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<LabeledMatrix> {
    let bytes = fs::read(path)?;
    let data = decode_matrix(path, &bytes)?;
    let sc_path = sidecar_path(path);
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(&sc_path)?)?;
    if sidecar.rows != data.nrows() || sidecar.cols != data.ncols() || sidecar.columns.len() != data.ncols() {
        return Err(FslmError::Format { path: sc_path, reason: "sidecar dimensions disagree with matrix".into() });
    }
    Ok(LabeledMatrix { data, columns: sidecar.columns, meta: sidecar.meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = LabeledMatrix {
            data: array![[1.0, f64::NAN, -0.0], [1e-300, 2.5, f64::INFINITY]],
            columns: vec!["a".into(), "b".into(), "c".into()],
            meta: serde_json::json!({"seed": 3}),
        };
        write_matrix(&path, &m).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(back.columns, m.columns);
        assert_eq!(back.meta, m.meta);
        for (x, y) in m.data.iter().zip(back.data.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode_matrix(&array![[1.0, 2.0]]);
        assert_eq!(&bytes[..8], b"FSLMMAT1");
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[24..32].try_into().unwrap()), 1.0);
    }

    #[test]
    fn truncated_is_rejected() {
        let bytes = encode_matrix(&array![[1.0, 2.0], [3.0, 4.0]]);
        let err = decode_matrix(Path::new("x"), &bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, FslmError::Format { .. }));
    }
}
