//! Binary checkpoint container: magic, version, JSON header, raw tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"DMAE";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus free-form JSON metadata (configs, step, seed, hash).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    let canonical = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
    let bytes = serde_json::to_vec(&canonical).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Parses only the metadata and the dtype of the first tensor, so callers
/// can pick the precision before loading.
pub fn peek(bytes: &[u8]) -> Result<(serde_json::Value, Option<String>)> {
    let header = read_header(bytes)?.0;
    Ok((header.meta, header.tensors.first().map(|t| t.dtype.clone())))
}

fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 12 {
        return Err(Error::Format("truncated checkpoint: missing preamble".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + json_len).ok_or_else(|| Error::Format("truncated checkpoint: header".into()))?;
    let header = serde_json::from_slice(body).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    Ok((header, 12 + json_len))
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let entry = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), dtype: T::DTYPE.into(), offset };
                offset += (t.len() * T::BYTES) as u64;
                entry
            })
            .collect();
        let header = Header { meta: self.meta.clone(), tensors };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let json_len = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
        let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&json_len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, start) = read_header(bytes)?;
        let payload = &bytes[start..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            if entry.dtype != T::DTYPE {
                return Err(Error::Format(format!("tensor {} has dtype {}, expected {}", entry.name, entry.dtype, T::DTYPE)));
            }
            if entry.offset != expected {
                return Err(Error::Format(format!("tensor {} has offset {}, expected {expected}", entry.name, entry.offset)));
            }
            let len: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let raw = payload
                .get(start..start + len * T::BYTES)
                .ok_or_else(|| Error::Format(format!("truncated checkpoint: tensor {}", entry.name)))?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
            expected += (len * T::BYTES) as u64;
        }
        if payload.len() as u64 != expected {
            return Err(Error::Format("trailing bytes after tensor payload".into()));
        }
        Ok(Self { meta: header.meta, tensors })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        Checkpoint {
            meta: serde_json::json!({"step": 3, "lr": 1.5e-4, "name": "x"}),
            tensors: vec![
                ("a".into(), Tensor::from_rows(2, 2, vec![1.0, -0.1, f32::MIN_POSITIVE, 3.5]).unwrap()),
                ("b".into(), Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()),
            ],
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(Error::Format(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(Error::Format(m)) if m.contains("version")));
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(m)) if m.contains("truncated")));
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash(&serde_json::json!({"x": 1, "y": 2})).unwrap();
        assert_eq!(a, config_hash(&serde_json::json!({"y": 2, "x": 1})).unwrap());
        assert_ne!(a, config_hash(&serde_json::json!({"x": 1, "y": 3})).unwrap());
        assert_eq!(a.len(), 64);
    }
}
