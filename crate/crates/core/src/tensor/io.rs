//! Binary tensor files.
//!
//! Layout (little-endian, no padding): `b"FMT1"`, rank as `u32` (always 4),
//! four `u64` dims, then `F*W*H*C` `f32` values in row-major order.
//! Values are held as `f64` in memory and narrowed to `f32` on write.

use std::fs;
use std::path::Path;

use super::{Dims, LatentVideo};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FMT1";
const RANK: u32 = 4;
const HEADER_LEN: usize = 4 + 4 + 8 * RANK as usize;

pub fn encode(t: &LatentVideo) -> Result<Vec<u8>> {
    t.check_finite()?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * t.data().len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&RANK.to_le_bytes());
    for d in t.dims().as_array() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(Error::Validation(format!("value {v} overflows f32")));
        }
        buf.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<LatentVideo> {
    if bytes.len() < 8 {
        return Err(Error::Length {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            std::str::from_utf8(MAGIC).unwrap()
        )));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if rank != RANK {
        return Err(Error::Format(format!("rank {rank} is not {RANK}")));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Length {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 8 + 8 * i;
        let raw = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        *d = usize::try_from(raw)
            .ok()
            .filter(|&v| v >= 1)
            .ok_or_else(|| Error::Format(format!("invalid dim {raw} on axis {i}")))?;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
    let expected = count
        .checked_mul(4)
        .and_then(|p| p.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let dims = Dims::new(dims[0], dims[1], dims[2], dims[3])?;
    LatentVideo::from_vec(dims, data)
}

pub fn tensor_write(t: &LatentVideo, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(t)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn tensor_read(path: impl AsRef<Path>) -> Result<LatentVideo> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}
