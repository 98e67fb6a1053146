//! Versioned binary container for named tensors plus a JSON metadata block.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "XSPLAIN\0"
//! version   u32      ARCHIVE_VERSION
//! kind      u32 length + UTF-8 bytes   ("backbone", "disentangle", ...)
//! metadata  u64 length + UTF-8 JSON
//! count     u32
//! tensor*   u32 name length + name, u8 dtype (4 = f32, 8 = f64),
//!           u64 rows, u64 cols, rows*cols values
//! digest    32 bytes SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"XSPLAIN\0";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Stored {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Stored)>,
}

impl Archive {
    pub fn new(kind: impl Into<String>, metadata: &impl Serialize) -> Self {
        Self {
            kind: kind.into(),
            metadata: serde_json::to_value(metadata).expect("metadata serializes"),
            tensors: Vec::new(),
        }
    }

    pub fn push_f32(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), Stored::F32(t)));
    }

    pub fn push_f64(&mut self, name: impl Into<String>, t: Tensor<f64>) {
        self.tensors.push((name.into(), Stored::F64(t)));
    }

    pub fn metadata<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_value(self.metadata.clone()).map_err(|e| Error::Format(format!("archive metadata: {e}")))
    }

    fn find(&self, name: &str) -> Result<&Stored> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("archive lacks tensor {name:?}")))
    }

    pub fn f32(&self, name: &str) -> Result<Tensor<f32>> {
        match self.find(name)? {
            Stored::F32(t) => Ok(t.clone()),
            Stored::F64(_) => Err(Error::Format(format!("tensor {name:?} is f64, expected f32"))),
        }
    }

    pub fn f64(&self, name: &str) -> Result<Tensor<f64>> {
        match self.find(name)? {
            Stored::F64(t) => Ok(t.clone()),
            Stored::F32(_) => Err(Error::Format(format!("tensor {name:?} is f32, expected f64"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind.len() as u32).to_le_bytes());
        out.extend_from_slice(self.kind.as_bytes());
        let meta = serde_json::to_vec(&self.metadata).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (dtype, rows, cols) = match t {
                Stored::F32(t) => (4u8, t.rows(), t.cols()),
                Stored::F64(t) => (8u8, t.rows(), t.cols()),
            };
            out.push(dtype);
            out.extend_from_slice(&(rows as u64).to_le_bytes());
            out.extend_from_slice(&(cols as u64).to_le_bytes());
            match t {
                Stored::F32(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Stored::F64(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not an xsplain archive (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("archive checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Format(format!("archive version {version} unsupported")));
        }
        let n = r.u32()? as usize;
        let kind = r.text(n)?;
        let n = r.u64()? as usize;
        let metadata = serde_json::from_slice(r.take(n)?)
            .map_err(|e| Error::Format(format!("archive metadata: {e}")))?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = r.text(n)?;
            let dtype = r.take(1)?[0];
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let len = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Format(format!("tensor {name:?} shape overflows")))?;
            let t = match dtype {
                4 => {
                    let raw = r.take(len * 4)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Stored::F32(Tensor::from_vec(rows, cols, data)?)
                }
                8 => {
                    let raw = r.take(len * 8)?;
                    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Stored::F64(Tensor::from_vec(rows, cols, data)?)
                }
                other => return Err(Error::Format(format!("tensor {name:?} has unknown dtype {other}"))),
            };
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self { kind, metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads an archive and checks its kind.
    pub fn load(path: impl AsRef<Path>, kind: &str) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let a = Self::from_bytes(&bytes)?;
        if a.kind != kind {
            return Err(Error::Format(format!(
                "{} holds a {:?} archive, expected {kind:?}",
                path.display(),
                a.kind
            )));
        }
        Ok(a)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("archive truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("archive string is not UTF-8".into()))
    }
}

/// Lowercase hex of a SHA-256 digest.
pub fn hex_digest(bytes: impl AsRef<[u8]>) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
