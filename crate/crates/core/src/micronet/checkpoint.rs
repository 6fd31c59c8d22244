//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes          | content                                     |
//! |----------------|---------------------------------------------|
//! | 8              | magic `COP3DNET`                            |
//! | 4              | format version (`u32`, currently 1)         |
//! | 4              | header length `H` (`u32`)                   |
//! | H              | UTF-8 header text (free-form `key=value`)   |
//! | 4              | tensor count `T` (`u32`)                    |
//! | 8 * T          | shape table: `rows: u32, cols: u32` each    |
//! | 8 * sum(r * c) | tensor payloads as `f64`, row-major, in order |

use super::{Matrix, MicronetError, Result};

pub const MAGIC: &[u8; 8] = b"COP3DNET";
pub const VERSION: u32 = 1;

pub fn encode(header: &str, tensors: &[Matrix]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|t| t.data().len() * 8).sum();
    let mut out = Vec::with_capacity(24 + header.len() + 8 * tensors.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    }
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(MicronetError::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(String, Vec<Matrix>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(MicronetError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(MicronetError::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header = std::str::from_utf8(r.take(header_len)?)
        .map_err(|e| MicronetError::Checkpoint(format!("header: {e}")))?
        .to_string();
    let count = r.u32()? as usize;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        shapes.push((r.u32()? as usize, r.u32()? as usize));
    }
    let mut tensors = Vec::with_capacity(count);
    for (rows, cols) in shapes {
        let raw = r.take(rows * cols * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MicronetError::Checkpoint("non-finite parameter".into()));
        }
        tensors.push(Matrix::from_vec(rows, cols, data)?);
    }
    if r.pos != bytes.len() {
        return Err(MicronetError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((header, tensors))
}
