//! Numerical building blocks: convolution, sampling, similarity and the
//! pointwise nonlinearities used by the encoder and the refiner.

pub mod conv;
pub mod sample;
pub mod similarity;

use crate::tensor::{Real, Tensor};

pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvParams, LayerGrad};
pub use sample::{
    bilinear_backward_location, bilinear_backward_map, bilinear_sample, bilinear_sample_into,
    clamp_location, downsample_to, resample2x, resample2x_backward, Direction,
};
pub use similarity::{
    cosine_backward, cosine_backward_into, cosine_similarity, cosine_with_norms, dot, norm,
    softmax_backward, softmax_weights,
};

/// Negative slope of the leaky rectifier used after convolutions.
pub const LEAKY_SLOPE: Real = 0.2;

pub fn leaky_relu(t: &Tensor) -> Tensor {
    t.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

/// Vjp of [`leaky_relu`] given the pre-activation.
pub fn leaky_relu_backward(pre: &Tensor, grad: &Tensor) -> Tensor {
    let mut g = grad.clone();
    for (d, &p) in g.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *d *= LEAKY_SLOPE;
        }
    }
    g
}

#[inline]
pub fn sigmoid(v: Real) -> Real {
    1.0 / (1.0 + (-v).exp())
}
