//! Versioned binary checkpoint container.
//!
//! Byte layout (all integers u32 little-endian):
//!
//! ```text
//! "CFSR"                      magic, 4 bytes
//! version                     currently 1
//! config_len, config bytes    UTF-8 "key=value\n" lines in sorted key order
//! n_tensors
//! per tensor:
//!   name_len, name bytes      UTF-8
//!   rank, dims[rank]
//!   payload                   prod(dims) f32 little-endian, row-major
//! sha256                      32 bytes over everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"CFSR";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnknownVersion(u32),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint truncated or malformed: {0}")]
    Malformed(String),
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name}: expected dims {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, dims: &[usize], data: Vec<f32>) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor {
            name: name.into(),
            dims: dims.to_vec(),
            data,
        });
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// The tensor called `name`, which must have `dims`.
    pub fn expect(&self, name: &str, dims: &[usize]) -> Result<&NamedTensor, CheckpointError> {
        let t = self.tensor(name).ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
        if t.dims != dims {
            return Err(CheckpointError::TensorShape {
                name: name.to_string(),
                expected: dims.to_vec(),
                found: t.dims.clone(),
            });
        }
        Ok(t)
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.get(key).map(String::as_str)
    }

    pub fn config_blob(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.config {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        for (k, v) in &self.config {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(CheckpointError::Config(format!("unencodable entry {k:?}")));
            }
        }
        let blob = self.config_blob();
        let payload: usize = self.tensors.iter().map(|t| 4 * t.data.len() + t.name.len() + 8 + 4 * t.dims.len()).sum();
        let mut out = Vec::with_capacity(16 + blob.len() + payload + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, blob.len() as u32);
        out.extend_from_slice(blob.as_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            put_u32(&mut out, t.name.len() as u32);
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.dims.len() as u32);
            for &d in &t.dims {
                put_u32(&mut out, d as u32);
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnknownVersion(version));
        }
        if bytes.len() < 8 + DIGEST_LEN {
            return Err(CheckpointError::Malformed("shorter than header + checksum".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 8 };
        let blob_len = r.u32()? as usize;
        let blob = std::str::from_utf8(r.take(blob_len)?).map_err(|_| CheckpointError::Malformed("config is not UTF-8".into()))?;
        let mut config = BTreeMap::new();
        for line in blob.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("config line {line:?}")))?;
            config.insert(k.to_string(), v.to_string());
        }
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} too large")))?;
            let raw = r.take(count.checked_mul(4).ok_or_else(|| CheckpointError::Malformed("size overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| CheckpointError::Malformed(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.config.insert("b.key".into(), "2".into());
        ck.config.insert("a.key".into(), "x y".into());
        ck.push("w", &[2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]);
        ck.push("s", &[], vec![7.0]);
        ck
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ck = sample();
        ck.save(&p1).unwrap();
        let back = Checkpoint::load(&p1).unwrap();
        assert_eq!(back, ck);
        back.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn config_blob_is_sorted() {
        assert_eq!(sample().config_blob(), "a.key=x y\nb.key=2\n");
    }

    #[test]
    fn corrupt_payload_byte_fails_checksum() {
        let mut bytes = sample().to_bytes().unwrap();
        let i = bytes.len() - DIGEST_LEN - 3;
        bytes[i] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Checksum)));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::UnknownVersion(9))));
        assert!(matches!(Checkpoint::from_bytes(b"RIFF...."), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn missing_and_misshapen_tensors() {
        let ck = sample();
        assert!(matches!(ck.expect("nope", &[1]), Err(CheckpointError::MissingTensor(_))));
        assert!(matches!(ck.expect("w", &[3, 2]), Err(CheckpointError::TensorShape { .. })));
        assert_eq!(ck.expect("w", &[2, 3]).unwrap().data.len(), 6);
    }

    #[test]
    fn large_preset_config_blob() {
        let mut ck = Checkpoint::default();
        EncoderConfig::large().to_kv("encoder.", &mut ck.config);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.config_value("encoder.d_model"), Some("848"));
        assert_eq!(back.config_value("encoder.n_layers"), Some("24"));
        assert_eq!(EncoderConfig::from_kv("encoder.", &back.config).unwrap(), EncoderConfig::large());
    }
}
