//! Binary cache of per-step parameter effects `E_t`.
//!
//! Layout: the 8-byte magic `AAEFFECT`, a little-endian `u32` header length,
//! a JSON header (format version, log fingerprint, mode, `K`, `p`, payload
//! SHA-256) and the payload `E_0, …, E_{K−1}` as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PropagationMode;
use crate::error::{Error, Result};
use crate::model::ParameterVector;

const MAGIC: &[u8; 8] = b"AAEFFECT";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EffectTable {
    pub log_fingerprint: String,
    pub mode: PropagationMode,
    pub effects: Vec<ParameterVector>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    log_fingerprint: String,
    mode: PropagationMode,
    #[serde(rename = "K")]
    k: usize,
    p: usize,
    sha256: String,
}

pub fn save_effects(table: &EffectTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let payload: Vec<u8> = table.effects.iter().flat_map(|e| e.to_le_bytes()).collect();
    let header = Header {
        format_version: CACHE_VERSION,
        log_fingerprint: table.log_fingerprint.clone(),
        mode: table.mode,
        k: table.effects.len(),
        p: table.effects.first().map_or(0, |e| e.len()),
        sha256: hex::encode(Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_effects(path: impl AsRef<Path>) -> Result<EffectTable> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::malformed(path, "not an effect cache"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(Error::Truncated {
            path: path.into(),
            expected: (12 + hlen) as u64,
            actual: bytes.len() as u64,
        });
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::malformed(path, e))?;
    if header.format_version != CACHE_VERSION {
        return Err(Error::UnsupportedVersion {
            found: header.format_version,
            supported: CACHE_VERSION,
        });
    }
    let payload = &body[hlen..];
    let expected = (header.k * header.p * 8) as u64;
    if (payload.len() as u64) < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected: 12 + hlen as u64 + expected,
            actual: bytes.len() as u64,
        });
    }
    if payload.len() as u64 != expected {
        return Err(Error::malformed(path, "trailing bytes after the payload"));
    }
    let digest = hex::encode(Sha256::digest(payload));
    if digest != header.sha256 {
        return Err(Error::ChecksumMismatch {
            path: path.into(),
            expected: header.sha256,
            actual: digest,
        });
    }
    let effects = if header.p == 0 {
        vec![ParameterVector::zeros(0); header.k]
    } else {
        payload
            .chunks_exact(header.p * 8)
            .map(ParameterVector::from_le_bytes)
            .collect::<Result<Vec<_>>>()?
    };
    Ok(EffectTable {
        log_fingerprint: header.log_fingerprint,
        mode: header.mode,
        effects,
    })
}
