//! Binary checkpoint framing shared by detector and generator weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"ADVFCKPT" | u32 format | u64 header_len | header JSON
//! repeated: u32 name_len | name | u64 count | count × f64
//! ```
//!
//! Serialization is a pure function of its inputs, so save → load → save
//! reproduces the same bytes.

use crate::error::{Error, Result};
use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 8] = b"ADVFCKPT";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<H> {
    pub header: H,
    pub sections: Vec<(String, Vec<f64>)>,
}

impl<H: Serialize + DeserializeOwned> Checkpoint<H> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let payload: usize = self.sections.iter().map(|(n, v)| 12 + n.len() + 8 * v.len()).sum();
        let mut out = Vec::with_capacity(20 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (name, values) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let format = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {format}")));
        }
        let header_len = r.u64()? as usize;
        let header = serde_json::from_slice(r.take(header_len)?)?;
        let mut sections = Vec::new();
        while r.pos < bytes.len() {
            let name_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("section name is not UTF-8".into()))?;
            let count = r.u64()? as usize;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            sections.push((name, values));
        }
        Ok(Self { header, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn section(&self, name: &str) -> Option<&[f64]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn take_section(&mut self, name: &str) -> Option<Vec<f64>> {
        let idx = self.sections.iter().position(|(n, _)| n == name)?;
        Some(self.sections.remove(idx).1)
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde::Deserialize;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Header {
        tag: String,
        scale: f64,
    }

    proptest! {
        #[test]
        fn save_load_save_is_bit_exact(values in proptest::collection::vec(any::<f64>(), 0..64), scale in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
            let ck = Checkpoint { header: Header { tag: "t".into(), scale }, sections: vec![("params".into(), values)] };
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::<Header>::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_truncated_blob() {
        let ck = Checkpoint {
            header: Header { tag: "x".into(), scale: 1.0 },
            sections: vec![("p".into(), vec![1.0, 2.0])],
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::<Header>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::<Header>::from_bytes(b"nonsense").is_err());
    }
}
