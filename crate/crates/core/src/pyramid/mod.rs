//! Multi-level feature pyramids for the source and the exemplar, plus the
//! domain alignment loss that pulls the two into a shared space.
//!
//! Levels are ordered coarse to fine: level 0 is the coarsest map and every
//! following level doubles both spatial dimensions.

pub mod encoder;
pub mod handcrafted;
pub mod weights;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use encoder::{
    encoder_backward, encoder_forward, extract_pyramid_encoder, DomainEncoders, EncoderTape,
    EncoderWeights,
};
pub use handcrafted::extract_pyramid_handcrafted;
pub use weights::{decode_layers, encode_layers, load_layers, save_layers};

/// An RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb(Tensor);

impl ImageRgb {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.channels() != 3 {
            return Err(Error::shape("image", "HxWx3", tensor.shape()));
        }
        if let Some(v) = tensor.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("image", format!("value {v} outside [0, 1]")));
        }
        Ok(ImageRgb(tensor))
    }

    /// Builds an image from a closure, clamping each value into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> Real) -> Self {
        ImageRgb(Tensor::from_fn(height, width, 3, |y, x, c| f(y, x, c).clamp(0.0, 1.0)))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    levels: Vec<Tensor>,
}

impl Pyramid {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("pyramid", "need at least one level"));
        }
        for pair in levels.windows(2) {
            let (coarse, fine) = (&pair[0], &pair[1]);
            if fine.height() != 2 * coarse.height() || fine.width() != 2 * coarse.width() {
                return Err(Error::shape(
                    "pyramid",
                    format!("{}x{} after {}", 2 * coarse.height(), 2 * coarse.width(), coarse.shape()),
                    fine.shape(),
                ));
            }
            if fine.channels() > coarse.channels() {
                return Err(Error::invalid(
                    "pyramid",
                    format!(
                        "channel count grows from {} to {} towards the fine end",
                        coarse.channels(),
                        fine.channels()
                    ),
                ));
            }
        }
        Ok(Pyramid { levels })
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn level(&self, l: usize) -> &Tensor {
        &self.levels[l]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn finest(&self) -> &Tensor {
        self.levels.last().expect("pyramid has at least one level")
    }

    pub fn into_levels(self) -> Vec<Tensor> {
        self.levels
    }

    /// Keeps only the `n` coarsest levels.
    pub fn truncated(&self, n: usize) -> Result<Pyramid> {
        if n == 0 || n > self.levels.len() {
            return Err(Error::invalid(
                "pyramid",
                format!("cannot keep {n} of {} levels", self.levels.len()),
            ));
        }
        Ok(Pyramid {
            levels: self.levels[..n].to_vec(),
        })
    }
}

/// Checks that both image dimensions are divisible by `2^(levels-1)`.
pub fn check_divisible(height: usize, width: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::invalid("pyramid", "need at least one level"));
    }
    let divisor = 1usize << (levels - 1);
    for dim in [height, width] {
        if dim == 0 || dim % divisor != 0 {
            return Err(Error::NotDivisible {
                what: "image dimension",
                dim,
                divisor,
            });
        }
    }
    Ok(())
}

fn check_compatible(op: &'static str, a: &Pyramid, b: &Pyramid) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("{} levels", a.len()), format!("{} levels", b.len())));
    }
    for (x, y) in a.levels.iter().zip(&b.levels) {
        if x.shape() != y.shape() {
            return Err(Error::shape(op, x.shape(), y.shape()));
        }
    }
    Ok(())
}

/// Sum over levels of the mean absolute difference within each level.
pub fn align_loss(pyr_x: &Pyramid, pyr_y: &Pyramid) -> Result<Real> {
    check_compatible("align_loss", pyr_x, pyr_y)?;
    Ok(pyr_x
        .levels
        .iter()
        .zip(&pyr_y.levels)
        .map(|(x, y)| {
            let sum: Real = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum();
            sum / x.len() as Real
        })
        .sum())
}

/// Gradient of [`align_loss`] with respect to `pyr_x`; the gradient with
/// respect to `pyr_y` is its negation.
pub fn align_loss_backward(pyr_x: &Pyramid, pyr_y: &Pyramid) -> Result<Vec<Tensor>> {
    check_compatible("align_loss_backward", pyr_x, pyr_y)?;
    Ok(pyr_x
        .levels
        .iter()
        .zip(&pyr_y.levels)
        .map(|(x, y)| {
            let n = x.len() as Real;
            let mut g = Tensor::zeros(x.height(), x.width(), x.channels());
            for ((d, a), b) in g.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                *d = if a > b {
                    1.0 / n
                } else if a < b {
                    -1.0 / n
                } else {
                    0.0
                };
            }
            g
        })
        .collect())
}
