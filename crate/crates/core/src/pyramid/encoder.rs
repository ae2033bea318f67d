//! U-net feature encoder.
//!
//! Down path: a stride-1 stem and `levels - 1` stride-2 convolutions, each
//! followed by a residual block, doubling the width at every halving. Up
//! path: bilinear 2x upsampling, concatenation with the matching down-path
//! activation, a merge convolution and a residual block. The coarsest
//! down-path activation and every up-path output form the pyramid, so with
//! base width 64 and four levels a `512x512` image yields
//! `64x64x512, 128x128x256, 256x256x128, 512x512x64`.
//!
//! Every convolution is followed by a leaky rectifier (slope 0.2). A residual
//! block computes `x + lrelu(conv(lrelu(conv(x))))`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_divisible, weights, ImageRgb, Pyramid};
use crate::error::{Error, Result, Shape};
use crate::ops::{
    conv2d, conv2d_backward, leaky_relu, leaky_relu_backward, resample2x, resample2x_backward,
    ConvParams, Direction, LayerGrad,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    levels: usize,
    base_width: usize,
    layers: Vec<ConvParams>,
}

/// `(k, c_in, c_out, stride)` of every layer for an architecture.
fn layout(levels: usize, base_width: usize) -> Vec<(usize, usize, usize, usize)> {
    let width = |i: usize| base_width << i;
    let mut out = vec![(3, 3, width(0), 1), (3, width(0), width(0), 1), (3, width(0), width(0), 1)];
    for i in 1..levels {
        out.push((3, width(i - 1), width(i), 2));
        out.push((3, width(i), width(i), 1));
        out.push((3, width(i), width(i), 1));
    }
    for j in (0..levels.saturating_sub(1)).rev() {
        out.push((3, width(j + 1) + width(j), width(j), 1));
        out.push((3, width(j), width(j), 1));
        out.push((3, width(j), width(j), 1));
    }
    out
}

impl EncoderWeights {
    pub fn zeros(levels: usize, base_width: usize) -> Result<Self> {
        Self::build(levels, base_width, |k, ci, co, s| ConvParams::zeros(k, ci, co, s, k / 2))
    }

    pub fn random(levels: usize, base_width: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(levels, base_width, |k, ci, co, s| {
            ConvParams::random(k, ci, co, s, k / 2, 1.0, &mut rng)
        })
    }

    fn build(
        levels: usize,
        base_width: usize,
        mut make: impl FnMut(usize, usize, usize, usize) -> Result<ConvParams>,
    ) -> Result<Self> {
        if levels == 0 || base_width == 0 {
            return Err(Error::invalid("encoder", "levels and base width must be positive"));
        }
        let layers = layout(levels, base_width)
            .into_iter()
            .map(|(k, ci, co, s)| make(k, ci, co, s))
            .collect::<Result<_>>()?;
        Ok(EncoderWeights {
            levels,
            base_width,
            layers,
        })
    }

    /// Infers the architecture from the layer list and checks that every
    /// shape chains. Stride and padding are reset to the architecture's.
    pub fn from_layers(layers: Vec<ConvParams>) -> Result<Self> {
        let n = layers.len();
        if n < 3 || (n + 3) % 6 != 0 {
            return Err(Error::invalid(
                "encoder",
                format!("{n} layers do not form an encoder (expected 6L-3)"),
            ));
        }
        let levels = (n + 3) / 6;
        let base_width = layers[0].out_channels();
        let expected = layout(levels, base_width);
        let mut fixed = Vec::with_capacity(n);
        for (i, (layer, &(k, ci, co, s))) in layers.into_iter().zip(&expected).enumerate() {
            if layer.kernel_size() != k || layer.in_channels() != ci || layer.out_channels() != co {
                return Err(Error::shape(
                    "encoder manifest",
                    format!("layer {i}: {k}x{k}x{ci}x{co}"),
                    format!(
                        "{0}x{0}x{1}x{2}",
                        layer.kernel_size(),
                        layer.in_channels(),
                        layer.out_channels()
                    ),
                ));
            }
            fixed.push(layer.with_geometry(s, k / 2)?);
        }
        Ok(EncoderWeights {
            levels,
            base_width,
            layers: fixed,
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn base_width(&self) -> usize {
        self.base_width
    }

    pub fn layers(&self) -> &[ConvParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvParams] {
        &mut self.layers
    }

    /// Channel count of pyramid level `l` (0 = coarsest).
    pub fn level_channels(&self, l: usize) -> usize {
        self.base_width << (self.levels - 1 - l)
    }

    /// Pyramid level shapes for an input of the given size, without running
    /// the network.
    pub fn output_shapes(&self, height: usize, width: usize) -> Result<Vec<Shape>> {
        check_divisible(height, width, self.levels)?;
        Ok((0..self.levels)
            .map(|l| {
                let f = 1 << (self.levels - 1 - l);
                Shape(height / f, width / f, self.level_channels(l))
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        weights::save_layers(path, &self.layers)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_layers(weights::load_layers(path)?)
    }
}

/// Encoders for the source domain and the exemplar domain. Both follow the
/// same architecture with independent weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainEncoders {
    pub source: EncoderWeights,
    pub exemplar: EncoderWeights,
}

impl DomainEncoders {
    pub fn shared(weights: EncoderWeights) -> Self {
        DomainEncoders {
            source: weights.clone(),
            exemplar: weights,
        }
    }

    pub fn to_layers(&self) -> Vec<ConvParams> {
        self.source.layers.iter().chain(&self.exemplar.layers).cloned().collect()
    }

    /// Accepts either a single encoder (`6L-3` layers, used for both
    /// domains) or two concatenated encoders (`2(6L-3)` layers).
    pub fn from_layers(mut layers: Vec<ConvParams>) -> Result<Self> {
        if layers.len() % 2 == 1 {
            return Ok(Self::shared(EncoderWeights::from_layers(layers)?));
        }
        let second = layers.split_off(layers.len() / 2);
        let source = EncoderWeights::from_layers(layers)?;
        let exemplar = EncoderWeights::from_layers(second)?;
        if source.levels != exemplar.levels {
            return Err(Error::invalid("encoder", "domain encoders disagree on level count"));
        }
        Ok(DomainEncoders { source, exemplar })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_layers(weights::load_layers(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        weights::save_layers(path, &self.to_layers())
    }
}

struct ConvRecord {
    input: Tensor,
    pre: Tensor,
}

/// Activations kept from [`encoder_forward`] for [`encoder_backward`].
pub struct EncoderTape {
    records: Vec<ConvRecord>,
    /// Shapes of the tensors fed to each 2x upsampling, in up-path order.
    up_inputs: Vec<Shape>,
}

struct Runner<'a> {
    weights: &'a EncoderWeights,
    next: usize,
    records: Vec<ConvRecord>,
}

impl Runner<'_> {
    fn conv(&mut self, input: Tensor) -> Result<Tensor> {
        let pre = conv2d(&input, &self.weights.layers[self.next])?;
        self.next += 1;
        let out = leaky_relu(&pre);
        self.records.push(ConvRecord { input, pre });
        Ok(out)
    }

    fn resblock(&mut self, x: Tensor) -> Result<Tensor> {
        let a = self.conv(x.clone())?;
        let mut y = self.conv(a)?;
        y.add_assign(&x);
        Ok(y)
    }
}

pub fn encoder_forward(image: &ImageRgb, weights: &EncoderWeights) -> Result<(Pyramid, EncoderTape)> {
    check_divisible(image.height(), image.width(), weights.levels)?;
    let mut run = Runner {
        weights,
        next: 0,
        records: Vec::with_capacity(weights.layers.len()),
    };
    let stem = run.conv(image.tensor().clone())?;
    let mut skips = vec![run.resblock(stem)?];
    for _ in 1..weights.levels {
        let down = run.conv(skips.last().unwrap().clone())?;
        skips.push(run.resblock(down)?);
    }
    let mut levels = vec![skips.pop().unwrap()];
    let mut up_inputs = Vec::new();
    while let Some(skip) = skips.pop() {
        let prev = levels.last().unwrap();
        up_inputs.push(prev.shape());
        let up = resample2x(prev, Direction::Up)?;
        let merged = run.conv(Tensor::concat_channels(&[&up, &skip])?)?;
        levels.push(run.resblock(merged)?);
    }
    let tape = EncoderTape {
        records: run.records,
        up_inputs,
    };
    Ok((Pyramid::new(levels)?, tape))
}

pub fn extract_pyramid_encoder(image: &ImageRgb, weights: &EncoderWeights) -> Result<Pyramid> {
    Ok(encoder_forward(image, weights)?.0)
}

struct BackRunner<'a> {
    weights: &'a EncoderWeights,
    tape: &'a EncoderTape,
    grads: Vec<LayerGrad>,
}

impl BackRunner<'_> {
    fn conv(&mut self, idx: usize, grad_out: &Tensor) -> Result<Tensor> {
        let rec = &self.tape.records[idx];
        let g_pre = leaky_relu_backward(&rec.pre, grad_out);
        let g = conv2d_backward(&rec.input, &self.weights.layers[idx], &g_pre)?;
        self.grads[idx].accumulate(&g.kernel, &g.bias);
        Ok(g.input)
    }

    /// Residual block whose two convolutions are `first` and `first + 1`.
    fn resblock(&mut self, first: usize, grad_out: &Tensor) -> Result<Tensor> {
        let g_a = self.conv(first + 1, grad_out)?;
        let mut g_x = self.conv(first, &g_a)?;
        g_x.add_assign(grad_out);
        Ok(g_x)
    }
}

/// Backpropagates per-level gradients (coarse to fine, one tensor per
/// pyramid level) to every layer's kernel and bias.
pub fn encoder_backward(
    tape: &EncoderTape,
    weights: &EncoderWeights,
    level_grads: &[Tensor],
) -> Result<Vec<LayerGrad>> {
    let levels = weights.levels;
    if level_grads.len() != levels {
        return Err(Error::shape(
            "encoder_backward",
            format!("{levels} level gradients"),
            format!("{}", level_grads.len()),
        ));
    }
    let mut run = BackRunner {
        weights,
        tape,
        grads: weights.layers.iter().map(LayerGrad::zeros_like).collect(),
    };
    let down_layers = 3 * levels;
    let mut skip_grads: Vec<Option<Tensor>> = vec![None; levels];

    // Up path, last step first. Step s (0-based, in forward order) merges
    // with down-path activation j = levels - 2 - s and emits level s + 1.
    let mut g_cur = level_grads[levels - 1].clone();
    for s in (0..levels - 1).rev() {
        let j = levels - 2 - s;
        let first = down_layers + 3 * s;
        let g_merged = run.resblock(first + 1, &g_cur)?;
        let g_cat = run.conv(first, &g_merged)?;
        let c_up = weights.level_channels(s);
        let parts = g_cat.split_channels(&[c_up, g_cat.channels() - c_up])?;
        skip_grads[j] = Some(parts[1].clone());
        let mut g_prev = resample2x_backward(tape.up_inputs[s], Direction::Up, &parts[0])?;
        g_prev.add_assign(&level_grads[s]);
        g_cur = g_prev;
    }

    // Down path from the coarsest activation back to the stem.
    for i in (0..levels).rev() {
        if let Some(skip) = skip_grads[i].take() {
            g_cur.add_assign(&skip);
        }
        let g_in = run.resblock(3 * i + 1, &g_cur)?;
        g_cur = run.conv(3 * i, &g_in)?;
    }
    Ok(run.grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, FnOp};
    use crate::tensor::Real;
    use rand::Rng;

    fn test_image(h: usize, w: usize, seed: u64) -> ImageRgb {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageRgb::from_fn(h, w, |_, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn full_scale_shapes() {
        let w = EncoderWeights::zeros(4, 64).unwrap();
        let shapes = w.output_shapes(512, 512).unwrap();
        assert_eq!(
            shapes,
            vec![
                Shape(64, 64, 512),
                Shape(128, 128, 256),
                Shape(256, 256, 128),
                Shape(512, 512, 64)
            ]
        );
        assert_eq!(w.layers().len(), 21);
        assert!(w.output_shapes(500, 512).is_err());
    }

    #[test]
    fn forward_matches_declared_shapes() {
        let w = EncoderWeights::random(3, 4, 9).unwrap();
        let img = test_image(16, 8, 1);
        let pyr = extract_pyramid_encoder(&img, &w).unwrap();
        let shapes: Vec<Shape> = pyr.levels().iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, w.output_shapes(16, 8).unwrap());
    }

    #[test]
    fn zero_weights_give_zero_pyramid() {
        let w = EncoderWeights::zeros(3, 2).unwrap();
        let pyr = extract_pyramid_encoder(&test_image(8, 8, 2), &w).unwrap();
        assert_eq!(pyr.len(), 3);
        assert!(pyr.levels().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn forward_is_deterministic() {
        let w = EncoderWeights::random(3, 4, 5).unwrap();
        let img = test_image(16, 16, 3);
        let a = extract_pyramid_encoder(&img, &w).unwrap();
        let b = extract_pyramid_encoder(&img, &w).unwrap();
        for (x, y) in a.levels().iter().zip(b.levels()) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn from_layers_round_trip_and_validation() {
        let w = EncoderWeights::random(2, 3, 1).unwrap();
        let bytes = super::weights::encode_layers(w.layers()).unwrap();
        let back = EncoderWeights::from_layers(super::weights::decode_layers(&bytes).unwrap()).unwrap();
        assert_eq!(back, w);

        let mut layers = w.layers().to_vec();
        layers[4] = ConvParams::same(3, 5, 6).unwrap();
        assert!(EncoderWeights::from_layers(layers).is_err());

        let both = DomainEncoders {
            source: w.clone(),
            exemplar: EncoderWeights::random(2, 3, 2).unwrap(),
        };
        assert_eq!(DomainEncoders::from_layers(both.to_layers()).unwrap(), both);
        let shared = DomainEncoders::from_layers(w.layers().to_vec()).unwrap();
        assert_eq!(shared.source, shared.exemplar);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let weights = EncoderWeights::random(2, 2, 17).unwrap();
        let img = test_image(4, 4, 8);
        let mut point = Vec::new();
        for l in weights.layers() {
            l.flatten_into(&mut point);
        }
        let rebuild = |x: &[Real]| {
            let mut w = weights.clone();
            let mut rest = x;
            for l in w.layers_mut() {
                rest = l.load_flat(rest);
            }
            w
        };
        let op = FnOp::new(
            |x: &[Real]| {
                let pyr = extract_pyramid_encoder(&img, &rebuild(x))?;
                Ok(pyr.levels().iter().flat_map(|t| t.data().to_vec()).collect())
            },
            |x: &[Real], c: &[Real]| {
                let w = rebuild(x);
                let (pyr, tape) = encoder_forward(&img, &w)?;
                let mut offset = 0;
                let grads: Vec<Tensor> = pyr
                    .levels()
                    .iter()
                    .map(|t| {
                        let g = Tensor::from_raw(t.height(), t.width(), t.channels(), c[offset..offset + t.len()].to_vec());
                        offset += t.len();
                        g
                    })
                    .collect();
                let lg = encoder_backward(&tape, &w, &grads)?;
                let mut out = Vec::new();
                for g in &lg {
                    g.flatten_into(&mut out);
                }
                Ok(out)
            },
        );
        assert!(grad_check(&op, &point, 1e-6).unwrap() < 1e-4);
    }
}
