//! Binary tensor container (`.ten`).
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                         |
//! |--------------|---------------------------------|
//! | 8            | magic `AFATEN\0\x01`            |
//! | 1            | rank `r` (u8, at least 1)       |
//! | 8 · r        | dimensions (u64 each)           |
//! | 4 · Π dims   | row-major `f32` payload         |

use std::fs;
use std::path::Path;

use afa_core::Tensor;

use crate::error::{FormatError, Result};

pub const MAGIC: [u8; 8] = *b"AFATEN\0\x01";
pub const EXTENSION: &str = "ten";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 8 * t.rank() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.push(u8::try_from(t.rank()).expect("tensor rank fits in a byte"));
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let mut pos = MAGIC.len();
    let rank = *bytes.get(pos).ok_or(FormatError::Truncated {
        expected: pos + 1,
        actual: bytes.len(),
    })? as usize;
    pos += 1;
    if rank == 0 {
        return Err(FormatError::EmptyShape);
    }
    let header_end = pos + 8 * rank;
    if bytes.len() < header_end {
        return Err(FormatError::Truncated {
            expected: header_end,
            actual: bytes.len(),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for chunk in bytes[pos..header_end].chunks_exact(8) {
        let dim = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        let dim = usize::try_from(dim).map_err(|_| FormatError::MalformedHeader {
            kind: "tensor",
            reason: format!("dimension {dim} does not fit in memory"),
        })?;
        count = count
            .checked_mul(dim)
            .ok_or_else(|| FormatError::MalformedHeader {
                kind: "tensor",
                reason: "element count overflows".into(),
            })?;
        shape.push(dim);
    }
    let expected = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(header_end))
        .ok_or_else(|| FormatError::MalformedHeader {
            kind: "tensor",
            reason: "payload size overflows".into(),
        })?;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingData {
            extra: bytes.len() - expected,
        });
    }
    let data = bytes[header_end..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
    decode(&bytes)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| FormatError::io(path, e))
}
