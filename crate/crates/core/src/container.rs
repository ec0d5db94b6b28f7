//! `OOALFT01` binary container.
//!
//! Two payload kinds share the 8-byte magic:
//!
//! ```text
//! feature stack:
//!   magic  "OOALFT01"
//!   u32 LE n_layers (>= 1), L, C_v, h_p, w_p, H, W
//!   f64 LE layers[n_layers][L][C_v], then cls[C_v]
//!
//! parameter container (checkpoints):
//!   magic  "OOALFT01"
//!   u32 LE 0            (n_layers = 0 marks a parameter container)
//!   u32 LE version
//!   u32 LE manifest byte length
//!   manifest (UTF-8 JSON)
//!   f64 LE tensors in manifest order, row-major
//! ```

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OOALFT01";
pub const PARAM_CONTAINER_VERSION: u32 = 1;

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn expect_magic(&mut self) -> Result<()> {
        let magic = self
            .take(8)
            .map_err(|_| Error::Format("file shorter than the 8-byte magic".into()))?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"OOALFT01\"",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Corruption(format!(
                "needed {n} bytes at offset {}, only {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Reads exactly `n` f64 values, rejecting non-finite ones.
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        let out: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::Corruption(format!("non-finite value at payload index {i}")));
        }
        Ok(out)
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    out.reserve(vs.len() * 8);
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} = {v} exceeds u32")))
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
