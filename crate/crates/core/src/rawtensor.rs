//! Raw tensor dump for cross-checking against external runtimes.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   b"NSRT"
//! u8      version (1)
//! u8      dtype   (1 = float32, 7 = int64; the ONNX codes)
//! u8[2]   reserved, zero
//! u32     rank
//! u64[rank] dims
//! data    numel × element size
//! ```

use crate::error::{Error, Result};
use crate::exec::Value;
use crate::tensor::{checked_numel, Tensor};

pub const MAGIC: &[u8; 4] = b"NSRT";
pub const VERSION: u8 = 1;
const DTYPE_F32: u8 = 1;
const DTYPE_I64: u8 = 7;
const MAX_RANK: u32 = 16;

pub fn encode(value: &Value) -> Vec<u8> {
    let (dtype, shape) = match value {
        Value::F32(t) => (DTYPE_F32, t.shape()),
        Value::I64(t) => (DTYPE_I64, t.shape()),
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, dtype, 0, 0]);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match value {
        Value::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Value::I64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Parse("raw tensor truncated".into()));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn decode(mut bytes: &[u8]) -> Result<Value> {
    let b = &mut bytes;
    if take(b, 4)? != MAGIC {
        return Err(Error::Parse("bad raw tensor magic".into()));
    }
    let hdr = take(b, 4)?;
    if hdr[0] != VERSION {
        return Err(Error::Parse(format!("unsupported raw tensor version {}", hdr[0])));
    }
    let rank = u32::from_le_bytes(take(b, 4)?.try_into().expect("4 bytes"));
    if rank > MAX_RANK {
        return Err(Error::Parse(format!("rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(b, 8)?.try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| Error::Parse("dimension too large".into()))?);
    }
    let n = checked_numel(&shape).ok_or_else(|| Error::Parse("element count overflows".into()))?;
    let width = match hdr[1] {
        DTYPE_F32 => 4,
        DTYPE_I64 => 8,
        d => return Err(Error::Parse(format!("unsupported dtype code {d}"))),
    };
    let len = n.checked_mul(width).ok_or_else(|| Error::Parse("data size overflows".into()))?;
    let data = take(b, len)?;
    if !b.is_empty() {
        return Err(Error::Parse(format!("{} trailing bytes", b.len())));
    }
    Ok(match hdr[1] {
        DTYPE_F32 => Value::F32(Tensor::from_vec(
            &shape,
            data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
        )?),
        _ => Value::I64(Tensor::from_vec(
            &shape,
            data.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        )?),
    })
}
