//! Binary embedding container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EMB1"
//! repeated until EOF, one record per patient:
//!   u32 id_len, id_len bytes UTF-8 patient id
//!   u32 n_tiles, u32 dim
//!   n_tiles * dim f32, row-major
//!   u8 coords flag (0 or 1)
//!   if flag == 1: n_tiles * 2 i32 (x, y) pixel coordinates
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use super::EmbeddingBag;
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";

pub fn parse_embedding_container(path: impl AsRef<Path>) -> Result<Vec<EmbeddingBag>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_embedding_container(&bytes)
}

pub fn read_embedding_container(bytes: &[u8]) -> Result<Vec<EmbeddingBag>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != EMBEDDING_MAGIC {
        return Err(Error::Parse("embedding container: bad magic bytes".into()));
    }
    let mut bags: Vec<EmbeddingBag> = Vec::new();
    while cur.pos < bytes.len() {
        let id_len = cur.u32()? as usize;
        let id = std::str::from_utf8(cur.take(id_len)?)
            .map_err(|_| Error::Parse(format!("non UTF-8 patient id at byte {}", cur.pos)))?
            .to_string();
        let n_tiles = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        if let Some(first) = bags.first() {
            if first.dim() != dim {
                return Err(Error::DimMismatch {
                    patient: id,
                    expected: first.dim(),
                    found: dim,
                });
            }
        }
        let raw = cur.take(n_tiles.checked_mul(dim).and_then(|n| n.checked_mul(4)).ok_or_else(
            || Error::Parse(format!("tile count overflow for patient {id:?}")),
        )?)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let vectors = Array2::from_shape_vec((n_tiles, dim), data).expect("length checked");
        let coords = match cur.take(1)?[0] {
            0 => None,
            1 => {
                let raw = cur.take(n_tiles * 8)?;
                Some(
                    raw.chunks_exact(8)
                        .map(|c| {
                            [
                                i32::from_le_bytes(c[0..4].try_into().unwrap()),
                                i32::from_le_bytes(c[4..8].try_into().unwrap()),
                            ]
                        })
                        .collect(),
                )
            }
            f => {
                return Err(Error::Parse(format!(
                    "invalid coords flag {f} at byte {}",
                    cur.pos - 1
                )))
            }
        };
        bags.push(EmbeddingBag::new(id, vectors, coords)?);
    }
    Ok(bags)
}

pub fn write_embedding_container<W: Write>(mut w: W, bags: &[EmbeddingBag]) -> Result<()> {
    let io = |e| Error::io("<embedding writer>", e);
    if let Some(first) = bags.first() {
        if let Some(bad) = bags.iter().find(|b| b.dim() != first.dim()) {
            return Err(Error::DimMismatch {
                patient: bad.patient_id.clone(),
                expected: first.dim(),
                found: bad.dim(),
            });
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(EMBEDDING_MAGIC);
    for bag in bags {
        buf.extend_from_slice(&(bag.patient_id.len() as u32).to_le_bytes());
        buf.extend_from_slice(bag.patient_id.as_bytes());
        buf.extend_from_slice(&(bag.n_tiles() as u32).to_le_bytes());
        buf.extend_from_slice(&(bag.dim() as u32).to_le_bytes());
        for v in bag.vectors.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        match &bag.tile_coords {
            None => buf.push(0),
            Some(coords) => {
                buf.push(1);
                for [x, y] in coords {
                    buf.extend_from_slice(&x.to_le_bytes());
                    buf.extend_from_slice(&y.to_le_bytes());
                }
            }
        }
    }
    w.write_all(&buf).map_err(io)?;
    w.flush().map_err(io)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                offset: self.bytes.len() as u64,
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
