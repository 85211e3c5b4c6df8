//! Named tensor records: the on-disk unit shared by checkpoints.
//!
//! Record layout, all integers little-endian:
//! name length (u64), name bytes (UTF-8), rank (u64), one extent per
//! dimension (u64 each), then the row-major payload as raw little-endian
//! `f32`. Round-trips are bit-exact for finite values.

use std::io::{Read, Write};

use crate::error::{DyError, Result};

use super::tensor::Tensor;

/// Caps that keep a corrupt header from provoking absurd allocations.
const MAX_NAME_LEN: u64 = 4096;
const MAX_RANK: u64 = 8;
const MAX_NUMEL: u64 = 1 << 31;

pub fn write_tensor_record<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    w.write_all(&(name.len() as u64).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_record<R: Read>(r: &mut R) -> Result<(String, Tensor)> {
    let name_len = read_u64(r)?;
    if name_len > MAX_NAME_LEN {
        return Err(DyError::format(
            "tensor record",
            format!("name length {name_len} exceeds cap {MAX_NAME_LEN}"),
        ));
    }
    let mut name_bytes = vec![0u8; name_len as usize];
    r.read_exact(&mut name_bytes)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|e| DyError::format("tensor record", format!("name is not UTF-8: {e}")))?;
    let rank = read_u64(r)?;
    if rank == 0 || rank > MAX_RANK {
        return Err(DyError::format(
            "tensor record",
            format!("rank {rank} out of range 1..={MAX_RANK}"),
        ));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let d = read_u64(r)?;
        numel = numel.saturating_mul(d.max(1));
        shape.push(d as usize);
    }
    if numel > MAX_NUMEL {
        return Err(DyError::format(
            "tensor record",
            format!("element count {numel} exceeds cap {MAX_NUMEL}"),
        ));
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut quad = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut quad)?;
        data.push(f32::from_le_bytes(quad));
    }
    Ok((name.clone(), Tensor::from_vec(&shape, data)?))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut bytes = [0u8; 8];
    r.read_exact(&mut bytes)?;
    Ok(u64::from_le_bytes(bytes))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut bytes = [0u8; 4];
    r.read_exact(&mut bytes)?;
    Ok(u32::from_le_bytes(bytes))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut bytes = [0u8; 8];
    r.read_exact(&mut bytes)?;
    Ok(f64::from_le_bytes(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let t = Tensor::from_vec(
            &[2, 3],
            vec![1.5, -0.25, 3.0e-8, 1234.5678, -1.0e20, 0.0],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_tensor_record(&mut buf, "layer0.router.head.weight", &t).unwrap();
        let (name, back) = read_tensor_record(&mut buf.as_slice()).unwrap();
        assert_eq!(name, "layer0.router.head.weight");
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_record_is_rejected() {
        let t = Tensor::zeros(&[4, 4]).unwrap();
        let mut buf = Vec::new();
        write_tensor_record(&mut buf, "w", &t).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor_record(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn absurd_header_is_rejected() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(read_tensor_record(&mut buf.as_slice()).is_err());
    }
}
