//! Binary correspondence field files.
//!
//! Layout, little-endian: magic `CORR`, version `u16`, `H`, `W`, `K` as
//! `u32`, then `H*W*K` coordinate pairs (`x`, `y`) as `f32`, then `H*W*K`
//! scores as `f32`. Candidates are stored row-major, `K` per position.

use hpmatch_core::matcher::CorrField;
use hpmatch_core::{Error, Real};

pub const MAGIC: [u8; 4] = *b"CORR";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 4 + 2 + 12;

/// A field as stored on disk, at `f32` precision.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldFile {
    pub height: u32,
    pub width: u32,
    pub k: u32,
    pub coords: Vec<[f32; 2]>,
    pub scores: Vec<f32>,
}

pub fn encoded_len(height: usize, width: usize, k: usize) -> usize {
    HEADER_BYTES + height * width * k * 12
}

impl FieldFile {
    pub fn from_field(field: &CorrField) -> Self {
        FieldFile {
            height: field.height() as u32,
            width: field.width() as u32,
            k: field.k() as u32,
            coords: field.coords().iter().map(|c| [c[0] as f32, c[1] as f32]).collect(),
            scores: field.scores().iter().map(|&s| s as f32).collect(),
        }
    }

    fn candidates(&self) -> usize {
        self.height as usize * self.width as usize * self.k as usize
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.candidates() * 12);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.height, self.width, self.k] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &self.coords {
            out.extend_from_slice(&c[0].to_le_bytes());
            out.extend_from_slice(&c[1].to_le_bytes());
        }
        for s in &self.scores {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, Error> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Truncated {
                expected: HEADER_BYTES,
                actual: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::BadVersion {
                expected: VERSION,
                found: version,
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap());
        let (height, width, k) = (word(0), word(1), word(2));
        let n = (height as usize)
            .checked_mul(width as usize)
            .and_then(|v| v.checked_mul(k as usize))
            .ok_or_else(|| Error::InvalidArgument {
                op: "field file",
                reason: "dimensions overflow".into(),
            })?;
        let expected = HEADER_BYTES + n * 12;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::TrailingData {
                expected,
                actual: bytes.len(),
            });
        }
        let float = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let body = HEADER_BYTES;
        let coords = (0..n).map(|i| [float(body + 8 * i), float(body + 8 * i + 4)]).collect();
        let scores = (0..n).map(|i| float(body + 8 * n + 4 * i)).collect();
        Ok(FieldFile {
            height,
            width,
            k,
            coords,
            scores,
        })
    }

    /// A field into a target of the given size. Candidates are re-sorted,
    /// since rounding to `f32` can reorder near-equal scores.
    pub fn into_field(self, target_height: usize, target_width: usize) -> Result<CorrField, Error> {
        CorrField::from_unsorted(
            self.height as usize,
            self.width as usize,
            self.k as usize,
            target_height,
            target_width,
            self.coords.iter().map(|c| [c[0] as Real, c[1] as Real]).collect(),
            self.scores.iter().map(|&s| s as Real).collect(),
        )
    }
}
