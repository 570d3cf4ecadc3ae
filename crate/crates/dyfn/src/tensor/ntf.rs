//! The NTF tensor container: `NTF1` magic, a little-endian u32 header length,
//! a UTF-8 JSON header `{"name", "dtype": "f32", "shape"}`, then the raw
//! little-endian f32 payload, row-major, exactly `product(shape) * 4` bytes.
//!
//! Values are stored as f32 and promoted to f64 on read; writes demote with
//! round-to-nearest.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{numel, Result, Tensor, TensorError};
use crate::util::atomic_write;

const MAGIC: &[u8; 4] = b"NTF1";

#[derive(Serialize, Deserialize)]
struct Header {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

pub fn write_tensor(path: &Path, name: &str, t: &Tensor) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        name: name.to_string(),
        dtype: "f32".to_string(),
        shape: t.shape().to_vec(),
    })
    .expect("header serialization");
    let mut bytes = Vec::with_capacity(8 + header.len() + t.len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    atomic_write(path, &bytes)?;
    Ok(())
}

pub fn read_tensor_named(path: &Path) -> Result<(String, Tensor)> {
    let mut file = fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    parse(&bytes)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    read_tensor_named(path).map(|(_, t)| t)
}

fn parse(bytes: &[u8]) -> Result<(String, Tensor)> {
    if bytes.len() < 4 {
        return Err(TensorError::Truncated("missing magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(TensorError::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(TensorError::Truncated("missing header length"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(TensorError::Truncated("header shorter than declared"));
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| TensorError::MalformedHeader(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(TensorError::UnsupportedDtype(header.dtype));
    }
    let payload = &bytes[8 + header_len..];
    let expected = numel(&header.shape) * 4;
    if payload.len() != expected {
        return Err(TensorError::PayloadSize {
            shape: header.shape,
            expected,
            got: payload.len(),
        });
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((header.name, Tensor::new(header.shape, data)?))
}
