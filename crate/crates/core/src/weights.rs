//! Binary container for named f64 tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"RFXW"  u32 version  u32 count
//! repeat count times:
//!     u32 name_len  name (UTF-8)  u32 rank  u64 dims[rank]  f64 data[prod(dims)]
//! ```

use std::fs;
use std::path::Path;

use crate::error::{FluxError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RFXW";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let payload: usize = tensors
        .iter()
        .map(|(n, t)| 8 + n.len() + 8 * t.rank() + 8 * t.len())
        .sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| FluxError::Format(format!("truncated at byte {}", self.pos)))?;
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

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(FluxError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FluxError::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FluxError::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?)
                .map_err(|_| FluxError::Format(format!("dimension overflow in `{name}`")))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| FluxError::Format(format!("size overflow in `{name}`")))?;
            shape.push(d);
        }
        let raw = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| FluxError::Format(format!("size overflow in `{name}`")))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(FluxError::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn write_file(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(tensors)).map_err(|e| FluxError::io(path, e))
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FluxError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a.weight".into(), Tensor::from_rows(&[[1.0, -2.5], [f64::MIN_POSITIVE, 1e300]])),
            ("scalar".into(), Tensor::new(Vec::<usize>::new(), vec![-0.0]).unwrap()),
            ("empty".into(), Tensor::zeros([0, 3])),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let back = decode(&encode(&s)).unwrap();
        assert_eq!(back.len(), s.len());
        for ((n1, t1), (n2, t2)) in s.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&[("x".into(), Tensor::from_vec(vec![1.0]))]);
        assert_eq!(&bytes[..4], b"RFXW");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes[16], b'x');
        assert_eq!(bytes.len(), 12 + 4 + 1 + 4 + 8 + 8);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode(&magic).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(decode(&version).is_err());
    }
}
