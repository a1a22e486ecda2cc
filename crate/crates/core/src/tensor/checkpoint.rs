//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "MITOSCKP"
//! version      u32       currently 1
//! meta_count   u64
//!   key        u64 byte length, UTF-8 bytes
//!   value      u64 byte length, UTF-8 bytes
//! param_count  u64
//!   name       u64 byte length, UTF-8 bytes
//!   ndims      u64
//!   dims       ndims × u64
//!   values     product(dims) × f64
//! ```
//!
//! Entries keep their on-disk order, so load-then-save reproduces the file
//! byte for byte.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{MitosError, Result};

pub const MAGIC: &[u8; 8] = b"MITOSCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in &self.params {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(8)? != MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(MitosError::Version {
                what: "checkpoint",
                found: version,
                expected: VERSION,
            });
        }
        let n_meta = r.u64()?;
        let mut meta = Vec::new();
        for _ in 0..n_meta {
            let k = r.string()?;
            let v = r.string()?;
            meta.push((k, v));
        }
        let n_params = r.u64()?;
        let mut params = Vec::new();
        for _ in 0..n_params {
            let name = r.string()?;
            let ndims = r.u64()? as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.err("tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| MitosError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MitosError::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> MitosError {
        MitosError::Format {
            path: self.origin.to_string(),
            line: 0,
            msg: format!("{} at byte {}", msg, self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("invalid UTF-8"))
    }
}
