//! Binary tensor file format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   8 bytes  "SAAPTNS1"
//! dtype   u32      0 = f32, 1 = u64
//! ndim    u32
//! dims    ndim × u64
//! payload row-major elements, no padding, no checksum
//! ```
//!
//! The trailing `1` of the magic is the format version.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, SaapError};
use crate::tensor::TensorBlock;

pub const MAGIC: &[u8; 8] = b"SAAPTNS1";
pub const DTYPE_F32: u32 = 0;
pub const DTYPE_U64: u32 = 1;

fn write_header(out: &mut Vec<u8>, dtype: u32, dims: &[u64]) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&dtype.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
}

/// Serializes a tensor block as a 2-d f32 tensor.
pub fn encode_tensor(t: &TensorBlock) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 + 16 + 4 * t.as_slice().len());
    write_header(&mut out, DTYPE_F32, &[t.rows() as u64, t.dim() as u64]);
    for x in t.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Serializes a 1-d u64 sequence.
pub fn encode_u64s(values: &[u64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * values.len());
    write_header(&mut out, DTYPE_U64, &[values.len() as u64]);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(SaapError::Truncated {
            expected: self.pos.saturating_add(n),
            found: self.buf.len(),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_header<'a>(buf: &'a [u8], expected_dtype: u32) -> Result<(Vec<u64>, Cursor<'a>)> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic = cur.take(8).map_err(|_| SaapError::BadMagic { found: buf.to_vec() })?;
    if magic != MAGIC {
        if magic[..7] == MAGIC[..7] {
            return Err(SaapError::UnsupportedVersion(magic[7]));
        }
        return Err(SaapError::BadMagic { found: magic.to_vec() });
    }
    let dtype = cur.u32()?;
    if dtype != expected_dtype {
        return Err(SaapError::BadDtype { found: dtype, expected: expected_dtype });
    }
    let ndim = cur.u32()? as usize;
    let dims = (0..ndim).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
    Ok((dims, cur))
}

fn payload_len(dims: &[u64], elem: usize) -> Result<usize> {
    dims.iter()
        .try_fold(elem as u64, |acc, &d| acc.checked_mul(d))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| SaapError::Malformed(format!("dims {dims:?} overflow")))
}

pub fn decode_tensor(buf: &[u8]) -> Result<TensorBlock> {
    let (dims, mut cur) = read_header(buf, DTYPE_F32)?;
    if dims.len() != 2 {
        return Err(SaapError::Malformed(format!("expected a 2-d tensor, found {} dims", dims.len())));
    }
    let n = payload_len(&dims, 4)?;
    let bytes = cur.take(n)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    TensorBlock::new(dims[0] as usize, dims[1] as usize, data)
}

pub fn decode_u64s(buf: &[u8]) -> Result<Vec<u64>> {
    let (dims, mut cur) = read_header(buf, DTYPE_U64)?;
    if dims.len() != 1 {
        return Err(SaapError::Malformed(format!("expected a 1-d sequence, found {} dims", dims.len())));
    }
    let n = payload_len(&dims, 8)?;
    let bytes = cur.take(n)?;
    Ok(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn tensor_write(t: &TensorBlock, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_tensor(t))?;
    Ok(())
}

pub fn tensor_read(path: impl AsRef<Path>) -> Result<TensorBlock> {
    decode_tensor(&read_all(path)?)
}

pub fn u64s_write(values: &[u64], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_u64s(values))?;
    Ok(())
}

pub fn u64s_read(path: impl AsRef<Path>) -> Result<Vec<u64>> {
    decode_u64s(&read_all(path)?)
}

fn read_all(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_round_trip() {
        let t = TensorBlock::zeros(0, 0);
        assert_eq!(decode_tensor(&encode_tensor(&t)).unwrap(), t);
    }

    #[test]
    fn small_round_trip_is_bit_exact() {
        let t = TensorBlock::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(bytes.len(), 8 + 4 + 4 + 16 + 24);
        let back = decode_tensor(&bytes).unwrap();
        assert_eq!(back.shape(), (2, 3));
        let a: Vec<u32> = t.as_slice().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = back.as_slice().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn header_layout() {
        let t = TensorBlock::new(1, 2, vec![1.5, -2.0]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[..8], b"SAAPTNS1");
        assert_eq!(&bytes[8..12], &0u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..24], &1u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &2u64.to_le_bytes());
        assert_eq!(&bytes[32..36], &1.5f32.to_le_bytes());
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode_tensor(&TensorBlock::zeros(1, 1));
        bytes[0] = b'X';
        assert!(matches!(decode_tensor(&bytes), Err(SaapError::BadMagic { .. })));
        assert!(matches!(decode_tensor(b"abc"), Err(SaapError::BadMagic { .. })));
    }

    #[test]
    fn wrong_version() {
        let mut bytes = encode_tensor(&TensorBlock::zeros(1, 1));
        bytes[7] = b'2';
        assert!(matches!(decode_tensor(&bytes), Err(SaapError::UnsupportedVersion(b'2'))));
    }

    #[test]
    fn wrong_dtype() {
        let bytes = encode_u64s(&[1, 2, 3]);
        assert!(matches!(decode_tensor(&bytes), Err(SaapError::BadDtype { found: 1, expected: 0 })));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode_tensor(&TensorBlock::new(2, 2, vec![1.0; 4]).unwrap());
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_tensor(cut), Err(SaapError::Truncated { .. })));
    }

    #[test]
    fn u64_round_trip() {
        let v = vec![0, 7, u64::MAX, 42];
        assert_eq!(decode_u64s(&encode_u64s(&v)).unwrap(), v);
        assert_eq!(decode_u64s(&encode_u64s(&[])).unwrap(), Vec::<u64>::new());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tns");
        let t = TensorBlock::new(3, 1, vec![0.25, -1.0, 8.0]).unwrap();
        tensor_write(&t, &p).unwrap();
        assert_eq!(tensor_read(&p).unwrap(), t);
    }
}
