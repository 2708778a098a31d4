//! Checkpoint layout: 8-byte magic `GPRILCK1`, little-endian `u64` header
//! length, UTF-8 JSON header, little-endian `u64` parameter count, then the
//! parameters as little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GPRILCK1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Architecture descriptor.
    pub header: Value,
    pub params: Vec<f64>,
}

pub fn write_checkpoint(path: impl AsRef<Path>, header: &Value, params: &[f64]) -> Result<()> {
    let header = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(24 + header.len() + 8 * params.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = &bytes[..];
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let hlen = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Value = serde_json::from_slice(take(hlen)?)?;
    let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let raw = take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("bad length".into()))?)?;
    let params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(Checkpoint { header, params })
}
