//! `RDMT` single-tensor files and `RDMA` multi-tensor archives.
//!
//! RDMT layout, all integers u32 little-endian:
//!
//! ```text
//! "RDMT" | version = 1 | name_len | name (UTF-8) | ndim | dims... | f32 LE data
//! ```
//!
//! An RDMA archive is `"RDMA" | version = 1 | count` followed by `count`
//! RDMT records back to back.

use std::collections::BTreeMap;

use rsaforge_core::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"RDMT";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"RDMA";
pub const FORMAT_VERSION: u32 = 1;
pub const MAX_NAME_LEN: usize = 255;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated input: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("non-finite value at index {index} of tensor {name:?}")]
    NonFinite { name: String, index: usize },
    #[error("tensor name is {0} bytes, limit is 255")]
    NameTooLong(usize),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("invalid shape {0:?}")]
    BadShape(Vec<u32>),
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("duplicate tensor name {0:?} in archive")]
    DuplicateName(String),
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn record_len(name: &str, t: &Tensor) -> usize {
    4 + 4 + 4 + name.len() + 4 + 4 * t.rank() + 4 * t.len()
}

fn append_record(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<(), FormatError> {
    if name.len() > MAX_NAME_LEN {
        return Err(FormatError::NameTooLong(name.len()));
    }
    out.reserve(record_len(name, t));
    out.extend_from_slice(TENSOR_MAGIC);
    push_u32(out, FORMAT_VERSION);
    push_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    push_u32(out, t.rank() as u32);
    for &d in t.shape() {
        push_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serialises one named tensor as an RDMT record.
pub fn encode_tensor(name: &str, t: &Tensor) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::new();
    append_record(&mut out, name, t)?;
    Ok(out)
}

/// Serialises named tensors, in the given order, as an RDMA archive.
pub fn encode_archive<'a, I>(entries: I) -> Result<Vec<u8>, FormatError>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let entries: Vec<_> = entries.into_iter().collect();
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(ARCHIVE_MAGIC);
    push_u32(&mut out, FORMAT_VERSION);
    push_u32(&mut out, entries.len() as u32);
    for (name, t) in entries {
        if !seen.insert(name) {
            return Err(FormatError::DuplicateName(name.to_string()));
        }
        append_record(&mut out, name, t)?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.saturating_add(n);
        if end > self.bytes.len() {
            return Err(FormatError::Truncated {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<(), FormatError> {
        let found = self.take(4)?;
        if found != magic {
            return Err(FormatError::BadMagic {
                found: [found[0], found[1], found[2], found[3]],
                expected: *magic,
            });
        }
        match self.u32()? {
            FORMAT_VERSION => Ok(()),
            v => Err(FormatError::UnsupportedVersion(v)),
        }
    }

    fn record(&mut self) -> Result<(String, Tensor), FormatError> {
        self.header(TENSOR_MAGIC)?;
        let name_len = self.u32()? as usize;
        if name_len > MAX_NAME_LEN {
            return Err(FormatError::NameTooLong(name_len));
        }
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| FormatError::BadName)?
            .to_string();
        let ndim = self.u32()? as usize;
        let dims_bytes = ndim
            .checked_mul(4)
            .ok_or(FormatError::BadShape(Vec::new()))?;
        let dims: Vec<u32> = self
            .take(dims_bytes)?
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if dims.is_empty() || dims.contains(&0) {
            return Err(FormatError::BadShape(dims));
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .and_then(|c| c.checked_mul(4).map(|_| c))
            .ok_or_else(|| FormatError::BadShape(dims.clone()))?;
        let payload = self.take(4 * count)?;
        let mut data = Vec::with_capacity(count);
        for (index, b) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if !v.is_finite() {
                return Err(FormatError::NonFinite { name, index });
            }
            data.push(v);
        }
        let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
        let t = Tensor::new(&shape, data).map_err(|_| FormatError::BadShape(dims))?;
        Ok((name, t))
    }

    fn finish(&self) -> Result<(), FormatError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

/// Parses one RDMT record; the input must contain nothing else.
pub fn decode_tensor(bytes: &[u8]) -> Result<(String, Tensor), FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let out = r.record()?;
    r.finish()?;
    Ok(out)
}

/// Parses an RDMA archive, keeping record order.
pub fn decode_archive(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(ARCHIVE_MAGIC)?;
    let count = r.u32()? as usize;
    let mut out: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let (name, t) = r.record()?;
        if out.iter().any(|(n, _)| *n == name) {
            return Err(FormatError::DuplicateName(name));
        }
        out.push((name, t));
    }
    r.finish()?;
    Ok(out)
}

/// [`decode_archive`] collected into a name-keyed map.
pub fn decode_archive_map(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>, FormatError> {
    Ok(decode_archive(bytes)?.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_zero_layout() {
        let t = Tensor::new(&[1], vec![0.0]).unwrap();
        let bytes = encode_tensor("z", &t).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + (4 + 1) + 4 + 4 + 4);
        assert_eq!(&bytes[..4], b"RDMT");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 0, 0, 0]);
    }

    #[test]
    fn round_trip_2x2() {
        let t = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (name, back) = decode_tensor(&encode_tensor("m", &t).unwrap()).unwrap();
        assert_eq!(name, "m");
        assert_eq!(back, t);
    }

    #[test]
    fn long_names_rejected() {
        let t = Tensor::new(&[1], vec![0.0]).unwrap();
        assert!(encode_tensor(&"x".repeat(255), &t).is_ok());
        assert_eq!(
            encode_tensor(&"x".repeat(256), &t),
            Err(FormatError::NameTooLong(256))
        );
    }
}
