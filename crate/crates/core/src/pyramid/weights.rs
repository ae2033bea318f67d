//! Binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CMWT" | version: u16 | layer count: u16
//! per layer: k_h: u32 | k_w: u32 | c_in: u32 | c_out: u32
//!            kernel: k_h*k_w*c_in*c_out f32, [ky][kx][c_in][c_out]
//!            bias:   c_out f32
//! ```
//!
//! Stride and padding are architectural and are not stored; decoded layers
//! come back as stride-1 "same" convolutions and the consumer re-applies
//! its geometry.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ops::ConvParams;
use crate::tensor::Real;

pub const WEIGHT_MAGIC: [u8; 4] = *b"CMWT";
pub const WEIGHT_VERSION: u16 = 1;

pub fn encode_layers(layers: &[ConvParams]) -> Result<Vec<u8>> {
    let count = u16::try_from(layers.len())
        .map_err(|_| Error::invalid("weights", format!("{} layers exceed u16", layers.len())))?;
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for layer in layers {
        let k = layer.kernel_size() as u32;
        for dim in [k, k, layer.in_channels() as u32, layer.out_channels() as u32] {
            out.extend_from_slice(&dim.to_le_bytes());
        }
        for &v in layer.kernel.iter().chain(&layer.bias) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, expected_total: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                expected: expected_total.max(self.pos + n),
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, 0)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, 0)?.try_into().unwrap()))
    }
}

pub fn decode_layers(bytes: &[u8]) -> Result<Vec<ConvParams>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, 8)?.try_into().unwrap();
    if magic != WEIGHT_MAGIC {
        return Err(Error::BadMagic {
            expected: WEIGHT_MAGIC,
            found: magic,
        });
    }
    let version = r.u16()?;
    if version != WEIGHT_VERSION {
        return Err(Error::BadVersion {
            expected: WEIGHT_VERSION,
            found: version,
        });
    }
    let count = r.u16()? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let (kh, kw) = (r.u32()? as usize, r.u32()? as usize);
        let (c_in, c_out) = (r.u32()? as usize, r.u32()? as usize);
        if kh != kw {
            return Err(Error::invalid("weights", format!("non-square kernel {kh}x{kw}")));
        }
        if kh % 2 == 0 {
            return Err(Error::invalid(
                "weights",
                format!("kernel size must be odd, manifest declares {kh}"),
            ));
        }
        let n_kernel = kh * kw * c_in * c_out;
        let n = n_kernel + c_out;
        let raw = r.take(4 * n, r.pos + 4 * n)?;
        let values: Vec<Real> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as Real)
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "weights" });
        }
        let (kernel, bias) = values.split_at(n_kernel);
        layers.push(ConvParams::new(kh, c_in, c_out, 1, kh / 2, kernel.to_vec(), bias.to_vec())?);
    }
    if r.pos != bytes.len() {
        return Err(Error::TrailingData {
            expected: r.pos,
            actual: bytes.len(),
        });
    }
    Ok(layers)
}

pub fn save_layers(path: impl AsRef<Path>, layers: &[ConvParams]) -> Result<()> {
    std::fs::write(path, encode_layers(layers)?)?;
    Ok(())
}

pub fn load_layers(path: impl AsRef<Path>) -> Result<Vec<ConvParams>> {
    decode_layers(&std::fs::read(path)?)
}
