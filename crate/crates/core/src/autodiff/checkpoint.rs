//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes   "TINERFCK"
//! version    u32 LE    1
//! meta_len   u64 LE    followed by meta_len bytes of UTF-8 (run config)
//! n_arrays   u64 LE
//! per array: name_len u32 LE, name bytes, len u64 LE
//! payload:   every array's values in table order, f64 little-endian
//! ```
//!
//! Tape segments are stored first and in tape order; non-trainable state
//! (the occupancy cache) may follow as extra named arrays.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::tape::ParameterTape;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TINERFCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_tape(tape: &ParameterTape, meta: impl Into<String>) -> Self {
        let arrays = tape
            .segments()
            .iter()
            .map(|s| (s.name.clone(), tape.values()[s.range()].to_vec()))
            .collect();
        Self {
            meta: meta.into(),
            arrays,
        }
    }

    pub fn push_array(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.arrays.push((name.into(), values));
    }

    pub fn array(&self, name: &str) -> Option<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    /// Copies stored segments into `tape`. Every tape segment must be present
    /// with the same length.
    pub fn restore_into(&self, tape: &mut ParameterTape) -> Result<()> {
        let segs = tape.segments().to_vec();
        for seg in segs {
            let vals = self
                .array(&seg.name)
                .ok_or_else(|| Error::Checkpoint(format!("segment `{}` missing", seg.name)))?;
            if vals.len() != seg.len {
                return Err(Error::Checkpoint(format!(
                    "segment `{}` has {} values, model expects {}",
                    seg.name,
                    vals.len(),
                    seg.len
                )));
            }
            tape.values_mut()[seg.range()].copy_from_slice(vals);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, vals) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(vals.len() as u64).to_le_bytes());
        }
        for (_, vals) in &self.arrays {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut bytes, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut bytes)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = read_u64(&mut bytes)? as usize;
        let meta = read_string(&mut bytes, meta_len)?;
        let n = read_u64(&mut bytes)? as usize;
        let mut table = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = read_u32(&mut bytes)? as usize;
            let name = read_string(&mut bytes, name_len)?;
            let len = read_u64(&mut bytes)? as usize;
            table.push((name, len));
        }
        let mut arrays = Vec::with_capacity(table.len());
        for (name, len) in table {
            if bytes.len() < len * 8 {
                return Err(Error::Checkpoint(format!("truncated payload in `{name}`")));
            }
            let (head, rest) = bytes.split_at(len * 8);
            let vals = head
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            bytes = rest;
            arrays.push((name, vals));
        }
        if !bytes.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len())));
        }
        Ok(Self { meta, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn read_exact(bytes: &mut &[u8], out: &mut [u8]) -> Result<()> {
    bytes
        .read_exact(out)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))
}

fn read_u32(bytes: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(bytes, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(bytes: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(bytes, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(bytes: &mut &[u8], len: usize) -> Result<String> {
    if bytes.len() < len {
        return Err(Error::Checkpoint("unexpected end of file".into()));
    }
    let (head, rest) = bytes.split_at(len);
    *bytes = rest;
    String::from_utf8(head.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
}
