//! Binary tensor dump format.
//!
//! Layout: magic bytes `HRTN`, rank as u32 little-endian, each extent as u64
//! little-endian, then the row-major binary64 payload (little-endian).

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HRTN";

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 + 8 * tensor.rank() + 8 * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &extent in &tensor.shape {
        out.extend_from_slice(&(extent as u64).to_le_bytes());
    }
    for &v in &tensor.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 {
        return Err(Error::Format("dump shorter than its header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected {MAGIC:02x?}",
            &bytes[..4]
        )));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = 8 + 8 * rank;
    if bytes.len() < header {
        return Err(Error::Format(format!("truncated shape header for rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 8 * i;
        let extent = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        shape.push(usize::try_from(extent).map_err(|_| {
            Error::Format(format!("extent {extent} does not fit this platform"))
        })?);
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != header + 8 * numel {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            bytes.len() - header,
            8 * numel
        )));
    }
    let data = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, data)
}
