//! `OLTENS1` tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"OLTENS1"            7 bytes
//! rank                  u8, 1..=3
//! extents               rank × u64
//! element width         u8, 4 (f32) or 8 (f64)
//! values                product(extents) × width bytes, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"OLTENS1";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + t.len() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.push(T::BYTES as u8);
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decode either element width, converting to `T`.
pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let bad = |reason: &str| Error::TensorFormat {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 || &bytes[..7] != MAGIC {
        return Err(bad("missing OLTENS1 magic"));
    }
    let rank = bytes[7] as usize;
    if !(1..=3).contains(&rank) {
        return Err(bad(&format!("rank {rank} outside 1..=3")));
    }
    let mut pos = 8;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let chunk = bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated extents"))?;
        shape.push(u64::from_le_bytes(chunk.try_into().unwrap()) as usize);
        pos += 8;
    }
    let width = *bytes.get(pos).ok_or_else(|| bad("missing element width"))? as usize;
    pos += 1;
    let count: usize = shape.iter().product();
    let body = &bytes[pos..];
    if body.len() != count * width {
        return Err(bad(&format!(
            "expected {} value bytes, found {}",
            count * width,
            body.len()
        )));
    }
    let data: Vec<T> = match width {
        8 => body.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
        4 => body
            .chunks_exact(4)
            .map(|c| T::of(f32::read_le(c) as f64))
            .collect(),
        w => return Err(bad(&format!("element width {w} is not 4 or 8"))),
    };
    Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
