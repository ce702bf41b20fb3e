//! Raw f32 tensor files used for recorded frames and counterexamples.
//!
//! Each record is a 16-byte header, magic `BQNX` then height, width and
//! channels as u32 LE, followed by `h·w·c` binary32 LE values. A file may hold
//! any number of records back to back.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::FormatError;
use crate::network::Shape3;

pub const TENSOR_MAGIC: &[u8; 4] = b"BQNX";

pub fn encode_tensor(shape: Shape3, values: &[f32], out: &mut Vec<u8>) -> Result<(), FormatError> {
    if values.len() != shape.len() {
        return Err(FormatError::Malformed(format!("{} values for shape {shape}", values.len())));
    }
    out.extend_from_slice(TENSOR_MAGIC);
    for d in [shape.h, shape.w, shape.c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(Shape3, Vec<f32>)>, FormatError> {
    let mut out = Vec::new();
    let mut rest = bytes;
    if rest.is_empty() {
        return Err(FormatError::Truncated);
    }
    while !rest.is_empty() {
        if rest.len() < 16 {
            return Err(FormatError::Truncated);
        }
        if &rest[..4] != TENSOR_MAGIC {
            return Err(FormatError::BadMagic);
        }
        let dim = |i: usize| u32::from_le_bytes(rest[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let shape = Shape3::new(dim(0), dim(1), dim(2));
        let n = shape.len();
        let body = n.checked_mul(4).ok_or_else(|| FormatError::Malformed("tensor too large".into()))?;
        if rest.len() < 16 + body {
            return Err(FormatError::Truncated);
        }
        let values = rest[16..16 + body].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((shape, values));
        rest = &rest[16 + body..];
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, shape: Shape3, tensors: &[Vec<f32>]) -> Result<(), FormatError> {
    let mut bytes = Vec::with_capacity(tensors.len() * (16 + 4 * shape.len()));
    for t in tensors {
        encode_tensor(shape, t, &mut bytes)?;
    }
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(Shape3, Vec<f32>)>, FormatError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_tensors(&bytes)
}
