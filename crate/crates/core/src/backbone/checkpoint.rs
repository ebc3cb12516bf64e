//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, JSON header, then
//! the concatenated little-endian `f64` arrays the header indexes.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"PSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: u32,
    pub module_version: String,
    pub config_hash: String,
    pub epoch: usize,
    pub metric_history: Vec<serde_json::Value>,
    pub extra: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    data: Vec<f64>,
}

/// SHA-256 of a config's canonical JSON.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Checkpoint {
    pub fn new(module_version: &str, config_hash: String, epoch: usize) -> Self {
        Self {
            header: CheckpointHeader {
                format: FORMAT_VERSION,
                module_version: module_version.to_string(),
                config_hash,
                epoch,
                metric_history: Vec::new(),
                extra: serde_json::Value::Null,
                arrays: Vec::new(),
            },
            data: Vec::new(),
        }
    }

    pub fn push_array(&mut self, name: impl Into<String>, shape: &[usize], values: &[f64]) {
        let len: usize = shape.iter().product();
        assert_eq!(len, values.len(), "array values do not match shape");
        self.header.arrays.push(ArrayEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.data.len(),
            len,
        });
        self.data.extend_from_slice(values);
    }

    pub fn array(&self, name: &str) -> Result<&[f64]> {
        let e = self
            .header
            .arrays
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name:?}")))?;
        Ok(&self.data[e.offset..e.offset + e.len])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        if header.format != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {}",
                header.format
            )));
        }
        let raw = &body[hlen..];
        if raw.len() % 8 != 0 {
            return Err(bad("array section is not a whole number of f64 values"));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        for e in &header.arrays {
            if e.offset + e.len > data.len() || e.shape.iter().product::<usize>() != e.len {
                return Err(Error::Checkpoint(format!("array {:?} is out of bounds", e.name)));
            }
        }
        Ok(Self { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the stored config hash equals `expected`.
    pub fn check_config(&self, expected: &str) -> Result<()> {
        if self.header.config_hash != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint config hash {} does not match current config {}",
                self.header.config_hash, expected
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = Checkpoint::new("0.1.0", "abc".into(), 3);
        c.push_array("w", &[2, 2], &[1.0, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0]);
        c.push_array("b", &[1], &[7.5]);
        c.header.extra = serde_json::json!({"lr": 0.001});
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.array("w").unwrap()[3].to_bits(), (1.0f64 / 3.0).to_bits());
        assert!(back.array("nope").is_err());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut c = Checkpoint::new("0.1.0", "abc".into(), 0);
        c.push_array("w", &[3], &[1.0, 2.0, 3.0]);
        let bytes = c.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT00000000").is_err());
        assert!(c.check_config("abc").is_ok());
        assert!(c.check_config("abd").is_err());
    }
}
