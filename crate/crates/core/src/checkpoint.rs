//! Binary tensor container shared by model checkpoints and encoder weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "COSEGCKP" | u32 version | u64 header length | JSON header
//! | f64 payload for each tensor in header order | SHA-256 of everything before
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{numel, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"COSEGCKP";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode(meta: &serde_json::Value, tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let header = Header {
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(n, t)| Entry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    let payload: usize = tensors.iter().map(|(_, t)| t.numel() * 8).sum();
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode(bytes: &[u8]) -> Result<TensorFile> {
    let corrupt = |m: &str| Error::CorruptFile(m.to_string());
    if bytes.len() < PREFIX_LEN {
        return Err(corrupt("file is truncated"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body_end = bytes.len().checked_sub(DIGEST_LEN).ok_or_else(|| corrupt("file is truncated"))?;
    if PREFIX_LEN + hlen > body_end {
        return Err(corrupt("file is truncated"));
    }
    let header: Header =
        serde_json::from_slice(&bytes[PREFIX_LEN..PREFIX_LEN + hlen]).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    let payload: usize = header.tensors.iter().map(|e| numel(&e.shape) * 8).sum();
    if PREFIX_LEN + hlen + payload != body_end {
        return Err(corrupt("file is truncated or has trailing data"));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(corrupt("checksum mismatch"));
    }
    let mut pos = PREFIX_LEN + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n = numel(&e.shape);
        let data = bytes[pos..pos + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos += 8 * n;
        tensors.push((e.name, Tensor::new(e.shape, data)));
    }
    Ok(TensorFile {
        meta: header.meta,
        tensors,
    })
}

/// Writes atomically via a sibling temporary file.
pub fn write(path: impl AsRef<Path>, meta: &serde_json::Value, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(meta, tensors)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
