//! Spatially adaptive modulation of an activation by the warped exemplar
//! stack, with positional normalization across channels.

use crate::error::{Error, Result, Shape};
use crate::ops::{conv2d, conv2d_backward, downsample_to, ConvParams, LayerGrad};
use crate::tensor::{Real, Tensor};

/// Added to the per-site variance before the square root.
pub const SPADE_EPS: Real = 1e-5;

/// The two convolutions that map the warped stack to `alpha` and `beta`.
/// Both take the stack's channels and emit one value per activation channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SpadeProjection {
    pub alpha: ConvParams,
    pub beta: ConvParams,
}

impl SpadeProjection {
    pub fn new(alpha: ConvParams, beta: ConvParams) -> Result<Self> {
        for p in [&alpha, &beta] {
            if p.stride() != 1 || 2 * p.padding() + 1 != p.kernel_size() {
                return Err(Error::invalid(
                    "spade_projection",
                    "projection convolutions must preserve spatial size",
                ));
            }
        }
        if alpha.in_channels() != beta.in_channels() || alpha.out_channels() != beta.out_channels() {
            return Err(Error::shape(
                "spade_projection",
                format!("{}->{}", alpha.in_channels(), alpha.out_channels()),
                format!("{}->{}", beta.in_channels(), beta.out_channels()),
            ));
        }
        Ok(SpadeProjection { alpha, beta })
    }

    /// `alpha = 1`, `beta = 0` everywhere, whatever the stack.
    pub fn identity(stack_channels: usize, channels: usize) -> Result<Self> {
        let alpha = ConvParams::new(
            1,
            stack_channels,
            channels,
            1,
            0,
            vec![0.0; stack_channels * channels],
            vec![1.0; channels],
        )?;
        let beta = ConvParams::zeros(1, stack_channels, channels, 1, 0)?;
        SpadeProjection::new(alpha, beta)
    }
}

#[derive(Clone, Debug)]
pub struct SpadeGrads {
    pub activation: Tensor,
    pub stack: Tensor,
    pub alpha: LayerGrad,
    pub beta: LayerGrad,
}

/// Per-site channel normalization: returns the normalized map and the
/// per-site `sigma`.
pub fn positional_norm(t: &Tensor) -> (Tensor, Vec<Real>) {
    let c = t.channels();
    let mut out = t.clone();
    let mut sigmas = Vec::with_capacity(t.height() * t.width());
    for p in 0..t.height() * t.width() {
        let v = out.site_mut(p);
        let mean = v.iter().sum::<Real>() / c as Real;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<Real>() / c as Real;
        let sigma = (var + SPADE_EPS).sqrt();
        for a in v.iter_mut() {
            *a = (*a - mean) / sigma;
        }
        sigmas.push(sigma);
    }
    (out, sigmas)
}

fn check(activation: &Tensor, stack: &Tensor, proj: &SpadeProjection) -> Result<()> {
    if stack.height() != activation.height() || stack.width() != activation.width() {
        return Err(Error::shape(
            "spade_modulate",
            Shape(activation.height(), activation.width(), stack.channels()),
            stack.shape(),
        ));
    }
    if proj.alpha.in_channels() != stack.channels() || proj.alpha.out_channels() != activation.channels() {
        return Err(Error::shape(
            "spade_modulate",
            format!("projection {}->{}", stack.channels(), activation.channels()),
            format!("projection {}->{}", proj.alpha.in_channels(), proj.alpha.out_channels()),
        ));
    }
    Ok(())
}

/// `alpha(stack) * (a - mu) / sigma + beta(stack)` with `mu`, `sigma` taken
/// over the channels at each site.
pub fn spade_modulate(activation: &Tensor, stack: &Tensor, proj: &SpadeProjection) -> Result<Tensor> {
    check(activation, stack, proj)?;
    let alpha = conv2d(stack, &proj.alpha)?;
    let beta = conv2d(stack, &proj.beta)?;
    let (mut out, _) = positional_norm(activation);
    for ((o, a), b) in out.data_mut().iter_mut().zip(alpha.data()).zip(beta.data()) {
        *o = a * *o + b;
    }
    Ok(out)
}

pub fn spade_modulate_backward(
    activation: &Tensor,
    stack: &Tensor,
    proj: &SpadeProjection,
    grad_out: &Tensor,
) -> Result<SpadeGrads> {
    check(activation, stack, proj)?;
    grad_out.expect_shape("spade_modulate_backward", activation.shape())?;
    let c = activation.channels();
    let alpha = conv2d(stack, &proj.alpha)?;
    let (normed, sigmas) = positional_norm(activation);

    let mut d_alpha = grad_out.clone();
    for (d, n) in d_alpha.data_mut().iter_mut().zip(normed.data()) {
        *d *= n;
    }
    let mut d_act = Tensor::zeros(activation.height(), activation.width(), c);
    for (p, &sigma) in sigmas.iter().enumerate() {
        let n = normed.site(p);
        let dn: Vec<Real> = grad_out.site(p).iter().zip(alpha.site(p)).map(|(g, a)| g * a).collect();
        let mean_dn = dn.iter().sum::<Real>() / c as Real;
        let mean_dn_n = dn.iter().zip(n).map(|(a, b)| a * b).sum::<Real>() / c as Real;
        for ((d, g), nv) in d_act.site_mut(p).iter_mut().zip(&dn).zip(n) {
            *d = (g - mean_dn - nv * mean_dn_n) / sigma;
        }
    }
    let ga = conv2d_backward(stack, &proj.alpha, &d_alpha)?;
    let gb = conv2d_backward(stack, &proj.beta, grad_out)?;
    let mut d_stack = ga.input;
    d_stack.add_assign(&gb.input);
    Ok(SpadeGrads {
        activation: d_act,
        stack: d_stack,
        alpha: LayerGrad {
            kernel: ga.kernel,
            bias: ga.bias,
        },
        beta: LayerGrad {
            kernel: gb.kernel,
            bias: gb.bias,
        },
    })
}

/// Concatenates per-level warps along channels after bringing each to
/// `height x width`: finer maps are averaged down, coarser ones are
/// replicated up by nearest neighbour.
pub fn stack_warps(warps: &[Tensor], height: usize, width: usize) -> Result<Tensor> {
    if warps.is_empty() {
        return Err(Error::invalid("stack_warps", "need at least one warp"));
    }
    let resized = warps
        .iter()
        .map(|w| {
            if w.height() >= height {
                return downsample_to(w, height, width);
            }
            let (fy, fx) = (height / w.height(), width / w.width());
            if fy * w.height() != height || fx * w.width() != width {
                return Err(Error::shape("stack_warps", Shape(height, width, w.channels()), w.shape()));
            }
            Ok(Tensor::from_fn(height, width, w.channels(), |y, x, c| w.get(y / fy, x / fx, c)))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_channels(&resized.iter().collect::<Vec<_>>())
}
