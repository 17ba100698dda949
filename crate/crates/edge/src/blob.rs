//! Binary weight blob.
//!
//! ```text
//! "CAPS" | version u16 | count u32 | tensors... | sha256 (32 bytes)
//! tensor: name_len u16 | name (UTF-8) | rank u8 | extents u32 x rank | f32 x prod(extents)
//! ```
//!
//! All integers and floats are little-endian; payloads are row-major. The
//! trailing hash covers every preceding byte.

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"CAPS";
pub const BLOB_VERSION: u16 = 1;
const HASH_LEN: usize = 32;
const HEADER_LEN: usize = 4 + 2 + 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BlobError {
    #[error("bad magic {0:02x?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported blob version {0}")]
    UnsupportedVersion(u16),
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("blob truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("malformed blob: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, BlobError>;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let t = Self {
            name: name.into(),
            shape,
            data,
        };
        t.check()?;
        Ok(t)
    }

    fn check(&self) -> Result<()> {
        if self.name.len() > u16::MAX as usize {
            return Err(BlobError::Malformed(format!("tensor name of {} bytes", self.name.len())));
        }
        if self.shape.len() > u8::MAX as usize {
            return Err(BlobError::Malformed(format!("{}: rank {}", self.name, self.shape.len())));
        }
        if self.shape.iter().any(|&e| e > u32::MAX as usize) {
            return Err(BlobError::Malformed(format!("{}: extent exceeds u32", self.name)));
        }
        let n: usize = self.shape.iter().product();
        if n != self.data.len() {
            return Err(BlobError::Malformed(format!(
                "{}: shape {:?} holds {n} values, got {}",
                self.name,
                self.shape,
                self.data.len()
            )));
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let count = u32::try_from(tensors.len()).map_err(|_| BlobError::Malformed("too many tensors".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for t in tensors {
        t.check()?;
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.shape.len() as u8);
        for &e in &t.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let hash = Sha256::digest(&out);
    out.extend_from_slice(&hash);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// Bytes available to the body, i.e. excluding the trailing hash.
    end: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let stop = self.pos.saturating_add(n);
        if stop > self.end {
            return Err(BlobError::Truncated {
                needed: stop.saturating_add(HASH_LEN),
                available: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..stop];
        self.pos = stop;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes a blob. Checks run in order: magic, version, layout (every
/// declared byte present), checksum, then no bytes between the last
/// tensor and the hash.
pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    if bytes.len() < 4 {
        return Err(BlobError::Truncated {
            needed: HEADER_LEN + HASH_LEN,
            available: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(BlobError::BadMagic(bytes[..4].to_vec()));
    }
    if bytes.len() < HEADER_LEN + HASH_LEN {
        return Err(BlobError::Truncated {
            needed: HEADER_LEN + HASH_LEN,
            available: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != BLOB_VERSION {
        return Err(BlobError::UnsupportedVersion(version));
    }
    let mut cur = Cursor {
        bytes,
        pos: 6,
        end: bytes.len() - HASH_LEN,
    };
    let count = cur.u32()?;
    // layout pass; the values are only trusted after the hash verifies
    let mut layout = Vec::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name_at = cur.pos;
        cur.take(name_len)?;
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| BlobError::Malformed("tensor size overflows".into()))?;
        let data_at = cur.pos;
        cur.take(n)?;
        layout.push((name_at..name_at + name_len, shape, data_at));
    }
    let body_end = cur.pos;
    let stored = &bytes[bytes.len() - HASH_LEN..];
    if Sha256::digest(&bytes[..bytes.len() - HASH_LEN]).as_slice() != stored {
        return Err(BlobError::ChecksumMismatch);
    }
    if body_end != bytes.len() - HASH_LEN {
        return Err(BlobError::Malformed(format!(
            "{} unexpected bytes before the checksum",
            bytes.len() - HASH_LEN - body_end
        )));
    }
    layout
        .into_iter()
        .map(|(name, shape, at)| {
            let name = std::str::from_utf8(&bytes[name])
                .map_err(|_| BlobError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let n: usize = shape.iter().product();
            let data = bytes[at..at + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(NamedTensor { name, shape, data })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_list_is_header_and_hash() {
        let b = encode(&[]).unwrap();
        assert_eq!(b.len(), HEADER_LEN + HASH_LEN);
        assert_eq!(&b[..10], b"CAPS\x01\x00\x00\x00\x00\x00");
        assert_eq!(hex::encode(&b[10..]), sha256_hex(&b[..10]));
        assert!(decode(&b).unwrap().is_empty());
    }

    #[test]
    fn two_by_two_layout() {
        let t = NamedTensor::new("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = encode(std::slice::from_ref(&t)).unwrap();
        let mut want = b"CAPS\x01\x00\x01\x00\x00\x00\x01\x00w\x02\x02\x00\x00\x00\x02\x00\x00\x00".to_vec();
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(&b[..b.len() - HASH_LEN], want.as_slice());
        assert_eq!(decode(&b).unwrap(), vec![t]);
    }

    #[test]
    fn error_kinds() {
        let t = NamedTensor::new("w", vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let good = encode(&[t]).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(BlobError::BadMagic(_))));
        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(decode(&bad), Err(BlobError::UnsupportedVersion(2)));
        let mut bad = good.clone();
        let last = bad.len() - HASH_LEN - 1;
        bad[last] ^= 0x10;
        assert_eq!(decode(&bad), Err(BlobError::ChecksumMismatch));
        assert!(matches!(decode(&good[..good.len() - 5]), Err(BlobError::Truncated { .. })));
        assert!(matches!(decode(&good[..2]), Err(BlobError::Truncated { .. })));
    }

    #[test]
    fn scalar_and_zero_extent_tensors() {
        let ts = vec![
            NamedTensor::new("s", vec![], vec![7.5]).unwrap(),
            NamedTensor::new("e", vec![0, 3], vec![]).unwrap(),
        ];
        assert_eq!(decode(&encode(&ts).unwrap()).unwrap(), ts);
    }

    #[test]
    fn shape_mismatch_rejected_on_encode() {
        assert!(NamedTensor::new("w", vec![2, 2], vec![1.0]).is_err());
    }
}
