//! Versioned binary artifact files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "TKRA" (4) | format version u32 (4) | kind tag (4) | payload length u64 (8)
//! payload (bincode) | SHA-256 of every preceding byte (32)
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TKRA";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 4 + 8;
const TRAILER_LEN: usize = 32;

/// A type that can be written as an artifact file.
pub trait Artifact: Serialize + DeserializeOwned {
    /// Four-byte tag that stops one artifact kind being loaded as another.
    const KIND: [u8; 4];
}

impl Artifact for crate::config::PipelineConfig {
    const KIND: [u8; 4] = *b"CONF";
}

impl Artifact for crate::data::Dataset {
    const KIND: [u8; 4] = *b"DATA";
}

pub fn to_bytes<T: Artifact>(obj: &T) -> Result<Vec<u8>> {
    let payload = bincode::serialize(obj).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + TRAILER_LEN);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&T::KIND);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn from_bytes<T: Artifact>(bytes: &[u8], origin: &Path) -> Result<T> {
    let corrupt = |message: &str| Error::Artifact {
        path: origin.into(),
        message: message.into(),
    };
    if bytes.len() < HEADER_LEN + TRAILER_LEN {
        return Err(corrupt("file too short"));
    }
    if bytes[0..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes[8..12] != T::KIND {
        return Err(corrupt(&format!(
            "artifact kind {:?} where {:?} was expected",
            String::from_utf8_lossy(&bytes[8..12]),
            String::from_utf8_lossy(&T::KIND)
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if bytes.len() != HEADER_LEN + len + TRAILER_LEN {
        return Err(corrupt("payload length does not match file size"));
    }
    let body_end = HEADER_LEN + len;
    let digest = Sha256::digest(&bytes[..body_end]);
    if digest.as_slice() != &bytes[body_end..] {
        return Err(corrupt("checksum mismatch"));
    }
    bincode::deserialize(&bytes[HEADER_LEN..body_end]).map_err(|e| corrupt(&e.to_string()))
}

pub fn save_artifact<T: Artifact>(obj: &T, path: &Path) -> Result<()> {
    let bytes = to_bytes(obj)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_artifact<T: Artifact>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Hex SHA-256 of a byte string, used to fingerprint artifact files.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
