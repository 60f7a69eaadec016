//! Versioned single-file archive for named `f32` arrays plus a JSON
//! metadata document.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes   "RDACKPT\0"
//! version  u32
//! hlen     u64       length of the JSON header
//! header   hlen      {"meta": ..., "arrays": [{"name", "shape"}, ...]}
//! payload            f32 values of every array, in header order
//! crc32    u32       over all preceding bytes
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamTensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"RDACKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<ParamTensor>,
}

pub fn write_archive(path: &Path, meta: &serde_json::Value, arrays: &[&ParamTensor]) -> Result<()> {
    let header = serde_json::to_vec(&serde_json::json!({
        "meta": meta,
        "arrays": arrays,
    }))?;
    let payload: usize = arrays.iter().map(|a| a.values.len() * 4).sum();
    let mut buf = Vec::with_capacity(24 + header.len() + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for a in arrays {
        for v in &a.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<(serde_json::Value, Vec<ParamTensor>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint archive"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(corrupt("checksum mismatch (truncated or modified)"));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header length out of range"))?;
    let header: Header =
        serde_json::from_slice(&body[20..header_end]).map_err(|_| corrupt("unreadable header"))?;
    let mut arrays = header.arrays;
    let mut cursor = header_end;
    for a in &mut arrays {
        let n: usize = a.shape.iter().product();
        let end = cursor + n * 4;
        if end > body.len() {
            return Err(corrupt("payload shorter than declared arrays"));
        }
        a.values = body[cursor..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cursor = end;
    }
    if cursor != body.len() {
        return Err(corrupt("trailing bytes after payload"));
    }
    Ok((header.meta, arrays))
}
