//! `NIDE` binary files for embeddings and token grids.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "NIDE" | version u16 | kind u16 | count u32 | dim u32 | extra u32
//! payload: count * dim * max(extra, 1) f32 values, row-major
//! footer:  u64 FNV-1a of the payload bytes
//! ```
//!
//! `extra` is the number of tokens per grid for [`FileKind::TokenGrid`] and
//! zero for plain embeddings. Values are held in memory as `f32` so a
//! read/write cycle reproduces the file byte for byte.

use std::hash::Hasher;
use std::io::{Read, Write};

use fnv::FnvHasher;
use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NIDE";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 20;

/// 64-bit FNV-1a over `bytes`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum FileKind {
    Embedding = 0,
    TokenGrid = 1,
}

impl TryFrom<u16> for FileKind {
    type Error = Error;

    fn try_from(v: u16) -> Result<Self> {
        match v {
            0 => Ok(Self::Embedding),
            1 => Ok(Self::TokenGrid),
            other => Err(Error::Format(format!("unknown kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub kind: FileKind,
    pub count: u32,
    pub dim: u32,
    pub extra: u32,
    pub data: Vec<f32>,
}

impl EmbeddingFile {
    /// One row per embedding; all rows must share a width.
    pub fn from_embeddings<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).ok_or(Error::EmptyInput("embeddings"))?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: r.len() });
            }
            data.extend(r.iter().map(|&x| x as f32));
        }
        Ok(Self { kind: FileKind::Embedding, count: rows.len() as u32, dim: dim as u32, extra: 0, data })
    }

    /// Token grids of identical shape `T x D`.
    pub fn from_grids(grids: &[Array2<f64>]) -> Result<Self> {
        let (t, d) = grids.first().map(|g| g.dim()).ok_or(Error::EmptyInput("grids"))?;
        let mut data = Vec::with_capacity(grids.len() * t * d);
        for g in grids {
            if g.dim() != (t, d) {
                return Err(Error::DimensionMismatch { expected: t * d, got: g.len() });
            }
            data.extend(g.iter().map(|&x| x as f32));
        }
        Ok(Self { kind: FileKind::TokenGrid, count: grids.len() as u32, dim: d as u32, extra: t as u32, data })
    }

    fn row_len(&self) -> usize {
        self.dim as usize * (self.extra as usize).max(1)
    }

    /// The `i`-th embedding or flattened grid.
    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        (0..self.count as usize).map(|i| self.row(i).iter().map(|&x| x as f64).collect()).collect()
    }

    pub fn grid(&self, i: usize) -> Result<Array2<f64>> {
        if self.kind != FileKind::TokenGrid {
            return Err(Error::Format("not a token-grid file".into()));
        }
        let v = self.row(i).iter().map(|&x| x as f64).collect();
        Array2::from_shape_vec((self.extra as usize, self.dim as usize), v).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4 + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u16).to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&self.extra.to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let sum = fnv1a64(&out[HEADER_LEN..]);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + 8 {
            return Err(Error::Format("file too short".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u16_at(4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let kind = FileKind::try_from(u16_at(6))?;
        let (count, dim, extra) = (u32_at(8), u32_at(12), u32_at(16));
        if kind == FileKind::Embedding && extra != 0 {
            return Err(Error::Format("embedding file with nonzero extra".into()));
        }
        let n = count as usize * dim as usize * (extra as usize).max(1);
        let payload_end = HEADER_LEN + n * 4;
        if bytes.len() != payload_end + 8 {
            return Err(Error::Format(format!("expected {} bytes, found {}", payload_end + 8, bytes.len())));
        }
        let stored = u64::from_le_bytes(bytes[payload_end..].try_into().unwrap());
        if fnv1a64(&bytes[HEADER_LEN..payload_end]) != stored {
            return Err(Error::Format("checksum mismatch".into()));
        }
        let data =
            bytes[HEADER_LEN..payload_end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { kind, count, dim, extra, data })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
