//! Versioned binary checkpoints: named f64 arrays plus a config echo.
//!
//! Layout (little-endian):
//! `DMCK` magic, u32 version, u32 kind length + bytes, u32 config length +
//! bytes, u32 entry count, then per entry: u32 name length + bytes, u32
//! rank, u64 dims, f64 payload. Round-trips are bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DMCK";
const VERSION: u32 = 1;

/// A checkpoint: artifact kind tag, config echo, and named tensors.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: String,
    pub entries: Vec<(String, Tensor)>,
}

fn w_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn w_bytes(out: &mut Vec<u8>, b: &[u8]) {
    w_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        w_u32(&mut out, VERSION);
        w_bytes(&mut out, self.kind.as_bytes());
        w_bytes(&mut out, self.config.as_bytes());
        w_u32(&mut out, self.entries.len() as u32);
        for (name, tensor) in &self.entries {
            w_bytes(&mut out, name.as_bytes());
            w_u32(&mut out, tensor.shape().len() as u32);
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = r.string()?;
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_bits(r.u64()?));
            }
            entries.push((
                name,
                Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?,
            ));
        }
        Ok(Checkpoint { kind, config, entries })
    }

    /// Write atomically (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f =
                fs::File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
            f.write_all(&self.to_bytes())
                .map_err(|e| Error::io(tmp.display().to_string(), e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry '{name}'")))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8 string".into()))
    }
}
