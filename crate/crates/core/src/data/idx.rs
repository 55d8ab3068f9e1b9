//! IDX files (the MNIST container): 4-byte big-endian magic whose low byte
//! is the number of dimensions, then one big-endian u32 per dimension, then
//! raw unsigned bytes.

use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: bytes.len() as u64,
            message: format!("file ends while reading {what}"),
        })
}

/// Parses an unsigned-byte IDX buffer, requiring the given magic number.
pub fn parse(bytes: &[u8], magic: u32) -> Result<IdxArray> {
    let found = read_u32(bytes, 0, "magic number")?;
    if found != magic {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        });
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|d| read_u32(bytes, 4 + 4 * d, "dimension sizes").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndims;
    let len: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() < len {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated payload: {} of {len} bytes present", body.len()),
        });
    }
    if body.len() > len {
        return Err(Error::Format {
            offset: (header + len) as u64,
            message: format!("{} trailing bytes after payload", body.len() - len),
        });
    }
    Ok(IdxArray {
        dims,
        data: body.to_vec(),
    })
}

pub fn read(path: impl AsRef<Path>, magic: u32) -> Result<IdxArray> {
    parse(&std::fs::read(path)?, magic)
}

/// Serializes an unsigned-byte IDX array; the magic is derived from the
/// number of dimensions.
pub fn to_bytes(array: &IdxArray) -> Vec<u8> {
    let magic = 0x0000_0800u32 | array.dims.len() as u32;
    let mut out = magic.to_be_bytes().to_vec();
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

pub fn write(path: impl AsRef<Path>, array: &IdxArray) -> Result<()> {
    std::fs::write(path, to_bytes(array))?;
    Ok(())
}
