//! Minimal binary container for numeric arrays ("CFB1").
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "CFB1" | u32 json_len | json metadata | raw f64 arrays ... | u32 crc32
//! ```
//!
//! The JSON document declares a schema version, the element dtype
//! (always "f64le"), the array names and shapes in storage order, and a
//! free-form `meta` object for the caller. The trailing CRC32 covers the
//! whole payload (length prefix, JSON, and array bytes), so any
//! truncation or corruption is detected on read. Writing the same
//! arrays and metadata twice produces byte-identical files.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use crate::error::{CoreError, Result};

pub const MAGIC: &[u8; 4] = b"CFB1";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayDecl {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    schema: u32,
    dtype: String,
    arrays: Vec<ArrayDecl>,
    meta: serde_json::Value,
}

/// A named array read back from a container.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Serializes arrays plus caller metadata into the container byte format.
pub fn encode(meta: &serde_json::Value, arrays: &[(&str, &[usize], &[f64])]) -> Result<Vec<u8>> {
    let mut decls = Vec::with_capacity(arrays.len());
    for (name, shape, data) in arrays {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(CoreError::invalid_input(format!(
                "array '{name}': shape {shape:?} implies {expected} elements, got {}",
                data.len()
            )));
        }
        decls.push(ArrayDecl { name: name.to_string(), shape: shape.to_vec() });
    }
    let header = Header {
        schema: SCHEMA_VERSION,
        dtype: "f64le".to_string(),
        arrays: decls,
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;

    let mut payload = Vec::with_capacity(8 + json.len());
    payload.extend_from_slice(&(json.len() as u32).to_le_bytes());
    payload.extend_from_slice(&json);
    for (_, _, data) in arrays {
        for &x in *data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&payload);

    let mut out = Vec::with_capacity(4 + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parses container bytes; verifies magic, schema, dtype, checksum, and
/// that the byte length matches the declared arrays exactly.
pub fn decode(bytes: &[u8]) -> Result<(serde_json::Value, Vec<NamedArray>)> {
    if bytes.len() < 12 {
        return Err(CoreError::format("container truncated before header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(CoreError::format("bad magic, not a CFB1 container"));
    }
    let payload = &bytes[4..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual_crc = crc32fast::hash(payload);
    if stored_crc != actual_crc {
        return Err(CoreError::format(format!(
            "checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )));
    }

    let json_len = u32::from_le_bytes(payload[..4].try_into().unwrap()) as usize;
    if payload.len() < 4 + json_len {
        return Err(CoreError::format("container truncated inside metadata"));
    }
    let header: Header = serde_json::from_slice(&payload[4..4 + json_len])?;
    if header.schema != SCHEMA_VERSION {
        return Err(CoreError::format(format!(
            "unsupported schema version {}",
            header.schema
        )));
    }
    if header.dtype != "f64le" {
        return Err(CoreError::format(format!("unsupported dtype '{}'", header.dtype)));
    }

    let mut offset = 4 + json_len;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for decl in &header.arrays {
        let count: usize = decl.shape.iter().product();
        let nbytes = count * 8;
        if payload.len() < offset + nbytes {
            return Err(CoreError::format(format!(
                "container truncated inside array '{}'",
                decl.name
            )));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in payload[offset..offset + nbytes].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        arrays.push(NamedArray { name: decl.name.clone(), shape: decl.shape.clone(), data });
        offset += nbytes;
    }
    if offset != payload.len() {
        return Err(CoreError::format(format!(
            "{} trailing bytes after declared arrays",
            payload.len() - offset
        )));
    }
    Ok((header.meta, arrays))
}

pub fn write_file(
    path: &Path,
    meta: &serde_json::Value,
    arrays: &[(&str, &[usize], &[f64])],
) -> Result<()> {
    let bytes = encode(meta, arrays)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<(serde_json::Value, Vec<NamedArray>)> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}
