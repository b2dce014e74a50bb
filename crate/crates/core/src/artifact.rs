//! Binary matrix files, JSON sidecars and checksums.

use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{Mat, ParamStore};

const MATRIX_MAGIC: &[u8; 8] = b"RRMX0001";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn matrix_to_bytes(m: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + m.len() * 8);
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for x in m.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn matrix_from_bytes(bytes: &[u8]) -> std::result::Result<Mat, String> {
    if bytes.len() < 24 || &bytes[..8] != MATRIX_MAGIC {
        return Err("bad matrix header".into());
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let n = rows.checked_mul(cols).ok_or("shape overflow")?;
    if bytes.len() != 24 + n * 8 {
        return Err(format!("expected {} data bytes, found {}", n * 8, bytes.len() - 24));
    }
    let data = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Array2::from_shape_vec((rows, cols), data).map_err(|e| e.to_string())
}

/// Write `m` and return the checksum of the written bytes.
pub fn write_matrix(path: &Path, m: &Mat) -> Result<String> {
    let bytes = matrix_to_bytes(m);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Read a matrix, verifying its checksum when one is given.
pub fn read_matrix(path: &Path, checksum: Option<&str>) -> Result<Mat> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if let Some(expected) = checksum {
        let got = sha256_hex(&bytes);
        if got != expected {
            return Err(Error::Corrupt {
                path: path.into(),
                reason: format!("checksum {got} != {expected}"),
            });
        }
    }
    matrix_from_bytes(&bytes).map_err(|reason| Error::Corrupt {
        path: path.into(),
        reason,
    })
}

pub fn write_params(path: &Path, store: &ParamStore) -> Result<String> {
    let bytes = store.to_bytes();
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn read_params(path: &Path, checksum: Option<&str>) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if let Some(expected) = checksum {
        let got = sha256_hex(&bytes);
        if got != expected {
            return Err(Error::Corrupt {
                path: path.into(),
                reason: format!("checksum {got} != {expected}"),
            });
        }
    }
    ParamStore::from_bytes(&bytes).map_err(|reason| Error::Corrupt {
        path: path.into(),
        reason,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
