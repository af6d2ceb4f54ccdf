//! Binary container shared by dataset files and model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes
//! version      u32
//! text_len     u64, then text_len bytes of UTF-8 "key=value\n" lines sorted by key
//! n_arrays     u32
//! per array:   name_len u32, name bytes, ndim u32, ndim × u64 dims, prod(dims) × f64
//! ```
//!
//! Nothing may follow the last array.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("unsupported format version {found} (expected {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("container has no `{0}` entry")]
    MissingKey(String),
    #[error("container has no array `{0}`")]
    MissingArray(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        assert!(!key.contains('=') && !key.contains('\n'), "bad meta key {key:?}");
        assert!(!value.contains('\n'), "meta value for {key} spans lines");
        self.meta.insert(key, value);
    }

    pub fn get(&self, key: &str) -> Result<&str, ContainerError> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ContainerError::MissingKey(key.to_string()))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, ContainerError> {
        self.get(key)?
            .parse()
            .map_err(|_| ContainerError::Corrupt(format!("unparseable `{key}`")))
    }

    pub fn push_array(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.arrays.push((name.into(), tensor));
    }

    pub fn array(&self, name: &str) -> Result<&Tensor, ContainerError> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| ContainerError::MissingArray(name.to_string()))
    }

    /// Canonical text block: one `key=value` line per entry, key-sorted.
    pub fn text_block(&self) -> String {
        self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_bytes(&self, magic: &[u8; 8], version: u32) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(magic);
        out.extend_from_slice(&version.to_le_bytes());
        let text = self.text_block();
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, tensor) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in tensor.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; 8], version: u32) -> Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != magic {
            return Err(ContainerError::Corrupt("bad magic bytes".into()));
        }
        let found = r.u32()?;
        if found != version {
            return Err(ContainerError::VersionMismatch {
                found,
                supported: version,
            });
        }
        let text_len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| ContainerError::Corrupt("text block is not UTF-8".into()))?;
        let mut meta = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ContainerError::Corrupt(format!("bad text line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let n_arrays = r.u32()?;
        let mut arrays = Vec::with_capacity(n_arrays as usize);
        for _ in 0..n_arrays {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ContainerError::Corrupt("array name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&c| c <= (bytes.len() - r.pos) / 8)
                .ok_or_else(|| ContainerError::Corrupt(format!("array `{name}` overruns the file")))?;
            let raw = r.take(count * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| ContainerError::Corrupt(e.to_string()))?;
            arrays.push((name, tensor));
        }
        if r.pos != bytes.len() {
            return Err(ContainerError::Corrupt("trailing bytes after last array".into()));
        }
        Ok(Self { meta, arrays })
    }

    pub fn write_file(&self, path: &Path, magic: &[u8; 8], version: u32) -> Result<(), ContainerError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes(magic, version))?;
        Ok(())
    }

    pub fn read_file(path: &Path, magic: &[u8; 8], version: u32) -> Result<Self, ContainerError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, magic, version)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ContainerError::Corrupt("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
