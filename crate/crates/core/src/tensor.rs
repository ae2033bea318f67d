//! Dense `height x width x channels` grids stored row-major with channels
//! innermost, so every spatial site owns one contiguous channel slice.

use crate::error::{Error, Result, Shape};

/// Scalar type used throughout the crate.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
/// Scalar type used throughout the crate.
#[cfg(feature = "f32")]
pub type Real = f32;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<Real>,
}

impl Tensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: Real) -> Self {
        Tensor {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a tensor from row-major HWC data, rejecting empty dimensions,
    /// a wrong length, or non-finite entries.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<Real>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(
                "tensor",
                format!("dimensions must be positive, got {height}x{width}x{channels}"),
            ));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "tensor",
                format!("{} values", height * width * channels),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor {
            height,
            width,
            channels,
            data,
        })
    }

    /// Like [`Tensor::from_vec`] but only checks the length. For internal
    /// producers whose arithmetic is already known to stay finite.
    pub(crate) fn from_raw(height: usize, width: usize, channels: usize, data: Vec<Real>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Tensor {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> Real,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Tensor::from_raw(height, width, channels, data)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        Shape(self.height, self.width, self.channels)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[Real] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> Real {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: Real) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    /// Channel slice at spatial site `(y, x)`.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[Real] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [Real] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Channel slice at linear site index `y * width + x`.
    #[inline]
    pub fn site(&self, index: usize) -> &[Real] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    #[inline]
    pub fn site_mut(&mut self, index: usize) -> &mut [Real] {
        let c = self.channels;
        &mut self.data[index * c..(index + 1) * c]
    }

    pub fn row_stride(&self) -> usize {
        self.width * self.channels
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn expect_shape(&self, op: &'static str, expected: Shape) -> Result<()> {
        if self.shape() != expected {
            return Err(Error::shape(op, expected, self.shape()));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Tensor {
        Tensor::from_raw(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Stacks tensors of equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
        let (h, w) = (first.height, first.width);
        for p in parts {
            if p.height != h || p.width != w {
                return Err(Error::shape("concat_channels", first.shape(), p.shape()));
            }
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(h * w * channels);
        for i in 0..h * w {
            for p in parts {
                data.extend_from_slice(p.site(i));
            }
        }
        Ok(Tensor::from_raw(h, w, channels, data))
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Tensor>> {
        let total: usize = sizes.iter().sum();
        if total != self.channels {
            return Err(Error::shape(
                "split_channels",
                format!("{total} channels"),
                format!("{} channels", self.channels),
            ));
        }
        let n = self.height * self.width;
        let mut parts: Vec<Vec<Real>> = sizes.iter().map(|&c| Vec::with_capacity(n * c)).collect();
        for i in 0..n {
            let site = self.site(i);
            let mut offset = 0;
            for (part, &c) in parts.iter_mut().zip(sizes) {
                part.extend_from_slice(&site[offset..offset + c]);
                offset += c;
            }
        }
        Ok(parts
            .into_iter()
            .zip(sizes)
            .map(|(d, &c)| Tensor::from_raw(self.height, self.width, c, d))
            .collect())
    }

    pub fn mean(&self) -> Real {
        self.data.iter().sum::<Real>() / self.data.len() as Real
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Real {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }
}
