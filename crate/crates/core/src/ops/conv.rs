//! 2-D cross-correlation over HWC tensors with hand-written vjps.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Square convolution kernel laid out as `[ky][kx][c_in][c_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    k: usize,
    c_in: usize,
    c_out: usize,
    stride: usize,
    padding: usize,
    pub kernel: Vec<Real>,
    pub bias: Vec<Real>,
}

/// Gradients produced by [`conv2d_backward`].
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Vec<Real>,
    pub bias: Vec<Real>,
}

/// Kernel and bias gradients for one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub kernel: Vec<Real>,
    pub bias: Vec<Real>,
}

impl LayerGrad {
    pub fn zeros_like(p: &ConvParams) -> Self {
        LayerGrad {
            kernel: vec![0.0; p.kernel.len()],
            bias: vec![0.0; p.bias.len()],
        }
    }

    pub fn accumulate(&mut self, kernel: &[Real], bias: &[Real]) {
        for (a, b) in self.kernel.iter_mut().zip(kernel) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(bias) {
            *a += b;
        }
    }

    pub fn flatten_into(&self, out: &mut Vec<Real>) {
        out.extend_from_slice(&self.kernel);
        out.extend_from_slice(&self.bias);
    }
}

impl ConvParams {
    pub fn new(
        k: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        padding: usize,
        kernel: Vec<Real>,
        bias: Vec<Real>,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::invalid("conv", format!("kernel size must be odd, got {k}")));
        }
        if stride == 0 || c_in == 0 || c_out == 0 {
            return Err(Error::invalid(
                "conv",
                format!("stride and channel counts must be positive (stride {stride}, {c_in}->{c_out})"),
            ));
        }
        if kernel.len() != k * k * c_in * c_out {
            return Err(Error::shape(
                "conv kernel",
                format!("{k}x{k}x{c_in}x{c_out}"),
                format!("{} values", kernel.len()),
            ));
        }
        if bias.len() != c_out {
            return Err(Error::shape(
                "conv bias",
                format!("{c_out} values"),
                format!("{} values", bias.len()),
            ));
        }
        Ok(ConvParams {
            k,
            c_in,
            c_out,
            stride,
            padding,
            kernel,
            bias,
        })
    }

    pub fn zeros(k: usize, c_in: usize, c_out: usize, stride: usize, padding: usize) -> Result<Self> {
        Self::new(
            k,
            c_in,
            c_out,
            stride,
            padding,
            vec![0.0; k * k * c_in * c_out],
            vec![0.0; c_out],
        )
    }

    /// Uniform fan-in initialization in `[-gain/sqrt(fan_in), gain/sqrt(fan_in)]`,
    /// zero bias. Values are rounded through `f32` so that weight files
    /// round-trip bit-exactly.
    pub fn random<R: Rng>(
        k: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        padding: usize,
        gain: Real,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(k, c_in, c_out, stride, padding)?;
        let bound = gain / ((k * k * c_in) as Real).sqrt();
        for w in &mut p.kernel {
            let v: Real = rng.gen_range(-bound..=bound);
            *w = v as f32 as Real;
        }
        Ok(p)
    }

    /// Replaces stride and padding, keeping the weights.
    pub fn with_geometry(mut self, stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("conv", "stride must be positive"));
        }
        self.stride = stride;
        self.padding = padding;
        Ok(self)
    }

    /// "Same" convolution: stride 1, padding `k / 2`.
    pub fn same(k: usize, c_in: usize, c_out: usize) -> Result<Self> {
        Self::zeros(k, c_in, c_out, 1, k / 2)
    }

    #[inline]
    pub fn kernel_size(&self) -> usize {
        self.k
    }
    #[inline]
    pub fn in_channels(&self) -> usize {
        self.c_in
    }
    #[inline]
    pub fn out_channels(&self) -> usize {
        self.c_out
    }
    #[inline]
    pub fn stride(&self) -> usize {
        self.stride
    }
    #[inline]
    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn num_params(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }

    /// Output spatial size, or `None` if the kernel does not fit.
    pub fn output_dims(&self, height: usize, width: usize) -> Option<(usize, usize)> {
        let span = |n: usize| {
            let padded = n + 2 * self.padding;
            (padded >= self.k).then(|| (padded - self.k) / self.stride + 1)
        };
        Some((span(height)?, span(width)?))
    }

    pub fn is_zero(&self) -> bool {
        self.kernel.iter().chain(&self.bias).all(|&v| v == 0.0)
    }

    /// Appends kernel then bias to `out`.
    pub fn flatten_into(&self, out: &mut Vec<Real>) {
        out.extend_from_slice(&self.kernel);
        out.extend_from_slice(&self.bias);
    }

    /// Reads kernel then bias from the front of `src`, returning the rest.
    pub fn load_flat<'a>(&mut self, src: &'a [Real]) -> &'a [Real] {
        let nk = self.kernel.len();
        let nb = self.bias.len();
        self.kernel.copy_from_slice(&src[..nk]);
        self.bias.copy_from_slice(&src[nk..nk + nb]);
        &src[nk + nb..]
    }

    #[inline]
    fn tap(&self, ky: usize, kx: usize, ci: usize) -> &[Real] {
        let start = ((ky * self.k + kx) * self.c_in + ci) * self.c_out;
        &self.kernel[start..start + self.c_out]
    }
}

fn check_input(op: &'static str, input: &Tensor, params: &ConvParams) -> Result<(usize, usize)> {
    if input.channels() != params.c_in {
        return Err(Error::shape(
            op,
            format!("HxWx{} input for a {}->{} kernel", params.c_in, params.c_in, params.c_out),
            input.shape(),
        ));
    }
    params
        .output_dims(input.height(), input.width())
        .ok_or_else(|| {
            Error::shape(
                op,
                format!("input at least {0}x{0} after padding", params.k),
                input.shape(),
            )
        })
}

/// Input coordinate read by output coordinate `o` at tap `t`, if in bounds.
#[inline]
fn source(o: usize, t: usize, stride: usize, padding: usize, len: usize) -> Option<usize> {
    let i = (o * stride + t) as isize - padding as isize;
    (i >= 0 && (i as usize) < len).then_some(i as usize)
}

pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let (oh, ow) = check_input("conv2d", input, params)?;
    let c_out = params.c_out;
    let mut out = vec![0.0; oh * ow * c_out];
    out.par_chunks_mut(ow * c_out).enumerate().for_each(|(oy, row)| {
        for ox in 0..ow {
            let acc = &mut row[ox * c_out..(ox + 1) * c_out];
            acc.copy_from_slice(&params.bias);
            accumulate_pixel(input, params, oy, ox, acc);
        }
    });
    Ok(Tensor::from_raw(oh, ow, c_out, out))
}

const TILE: usize = 8;

/// Adds the kernel response at output `(oy, ox)` to `acc`, in
/// `(ky, kx, c_in)` order.
#[inline]
fn accumulate_pixel(input: &Tensor, params: &ConvParams, oy: usize, ox: usize, acc: &mut [Real]) {
    let (k, c_in, c_out) = (params.k, params.c_in, params.c_out);
    let x0 = (ox * params.stride) as isize - params.padding as isize;
    let row_inside = x0 >= 0 && x0 as usize + k <= input.width();
    for ky in 0..k {
        let Some(iy) = source(oy, ky, params.stride, params.padding, input.height()) else {
            continue;
        };
        if row_inside {
            // The k taps of this kernel row read one contiguous input span.
            let start = (iy * input.width() + x0 as usize) * c_in;
            let span = &input.data()[start..start + k * c_in];
            let weights = &params.kernel[ky * k * c_in * c_out..(ky + 1) * k * c_in * c_out];
            axpy_span(span, weights, acc);
            continue;
        }
        for kx in 0..k {
            let Some(ix) = source(ox, kx, params.stride, params.padding, input.width()) else {
                continue;
            };
            let start = (ky * k + kx) * c_in * c_out;
            axpy_span(input.pixel(iy, ix), &params.kernel[start..start + c_in * c_out], acc);
        }
    }
}

/// `acc[o] += sum_j span[j] * weights[j * c_out + o]`, accumulating over `j`
/// in order for every `o`.
#[inline]
fn axpy_span(span: &[Real], weights: &[Real], acc: &mut [Real]) {
    let c_out = acc.len();
    let tiles = c_out / TILE;
    for t in 0..tiles {
        let mut reg: [Real; TILE] = acc[t * TILE..(t + 1) * TILE].try_into().unwrap();
        for (j, &a) in span.iter().enumerate() {
            let w: &[Real; TILE] = weights[j * c_out + t * TILE..j * c_out + (t + 1) * TILE]
                .try_into()
                .unwrap();
            for i in 0..TILE {
                reg[i] += a * w[i];
            }
        }
        acc[t * TILE..(t + 1) * TILE].copy_from_slice(&reg);
    }
    let rest = tiles * TILE;
    if rest < c_out {
        for (j, &a) in span.iter().enumerate() {
            let w = &weights[j * c_out + rest..(j + 1) * c_out];
            for (o, &wv) in acc[rest..].iter_mut().zip(w) {
                *o += a * wv;
            }
        }
    }
}

/// Vector-Jacobian product of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward(input: &Tensor, params: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    let (oh, ow) = check_input("conv2d_backward", input, params)?;
    grad_out.expect_shape("conv2d_backward", crate::error::Shape(oh, ow, params.c_out))?;
    let (k, s, p) = (params.k, params.stride, params.padding);
    let (ih, iw, c_in, c_out) = (input.height(), input.width(), params.c_in, params.c_out);

    // Input gradient in gather form: each input site sums over the outputs that read it.
    let mut d_input = vec![0.0; ih * iw * c_in];
    d_input.par_chunks_mut(iw * c_in).enumerate().for_each(|(iy, row)| {
        for ix in 0..iw {
            let acc = &mut row[ix * c_in..(ix + 1) * c_in];
            for ky in 0..k {
                let ty = iy + p;
                if ty < ky || (ty - ky) % s != 0 || (ty - ky) / s >= oh {
                    continue;
                }
                let oy = (ty - ky) / s;
                for kx in 0..k {
                    let tx = ix + p;
                    if tx < kx || (tx - kx) % s != 0 || (tx - kx) / s >= ow {
                        continue;
                    }
                    let g = grad_out.pixel(oy, (tx - kx) / s);
                    for (ci, a) in acc.iter_mut().enumerate() {
                        *a += dot_plain(params.tap(ky, kx, ci), g);
                    }
                }
            }
        }
    });

    let mut d_kernel = vec![0.0; params.kernel.len()];
    d_kernel
        .par_chunks_mut(c_in * c_out)
        .enumerate()
        .for_each(|(tap, block)| {
            let (ky, kx) = (tap / k, tap % k);
            for oy in 0..oh {
                let Some(iy) = source(oy, ky, s, p, ih) else {
                    continue;
                };
                for ox in 0..ow {
                    let Some(ix) = source(ox, kx, s, p, iw) else {
                        continue;
                    };
                    let g = grad_out.pixel(oy, ox);
                    for (ci, &a) in input.pixel(iy, ix).iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        for (d, &gv) in block[ci * c_out..(ci + 1) * c_out].iter_mut().zip(g) {
                            *d += a * gv;
                        }
                    }
                }
            }
        });

    let mut d_bias = vec![0.0; c_out];
    for i in 0..oh * ow {
        for (d, &g) in d_bias.iter_mut().zip(grad_out.site(i)) {
            *d += g;
        }
    }

    Ok(ConvGrads {
        input: Tensor::from_raw(ih, iw, c_in, d_input),
        kernel: d_kernel,
        bias: d_bias,
    })
}

#[inline]
fn dot_plain(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, FnOp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_1x1_reproduces_input() {
        let input = Tensor::from_fn(3, 4, 2, |y, x, c| (y * 7 + x * 3 + c) as Real * 0.5);
        let mut p = ConvParams::same(1, 2, 2).unwrap();
        p.kernel = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(conv2d(&input, &p).unwrap(), input);
    }

    #[test]
    fn zero_kernel_gives_bias_map() {
        let input = Tensor::from_fn(4, 4, 3, |y, x, c| (y + x + c) as Real);
        let mut p = ConvParams::same(3, 3, 2).unwrap();
        p.bias = vec![0.25, -1.5];
        let out = conv2d(&input, &p).unwrap();
        for i in 0..16 {
            assert_eq!(out.site(i), &[0.25, -1.5]);
        }
    }

    #[test]
    fn ones_kernel_counts_center_neighbourhood() {
        let input = Tensor::filled(3, 3, 1, 1.0);
        let mut p = ConvParams::same(3, 1, 1).unwrap();
        p.kernel = vec![1.0; 9];
        let out = conv2d(&input, &p).unwrap();
        assert_eq!(out.get(1, 1, 0), 9.0);
        assert_eq!(out.get(0, 0, 0), 4.0);
        assert_eq!(out.get(0, 1, 0), 6.0);
    }

    #[test]
    fn strided_output_dims() {
        let p = ConvParams::zeros(3, 1, 1, 2, 1).unwrap();
        assert_eq!(p.output_dims(8, 6), Some((4, 3)));
        let p = ConvParams::zeros(5, 1, 1, 1, 0).unwrap();
        assert_eq!(p.output_dims(3, 8), None);
    }

    #[test]
    fn rejects_even_kernel_and_channel_mismatch() {
        assert!(ConvParams::zeros(2, 1, 1, 1, 0).is_err());
        let p = ConvParams::same(3, 4, 2).unwrap();
        let err = conv2d(&Tensor::zeros(5, 5, 3), &p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("5x5x3") && msg.contains("HxWx4"), "{msg}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, stride, padding) in &[(3usize, 1usize, 1usize), (3, 2, 1), (1, 1, 0), (5, 2, 2)] {
            let params = ConvParams::random(k, 2, 3, stride, padding, 1.0, &mut rng).unwrap();
            let input = Tensor::from_fn(6, 5, 2, |_, _, _| rng.gen_range(-1.0..1.0));
            let n_in = input.len();
            let n_k = params.kernel.len();
            let unpack = |x: &[Real]| {
                let t = Tensor::from_raw(6, 5, 2, x[..n_in].to_vec());
                let mut q = params.clone();
                q.load_flat(&x[n_in..]);
                (t, q)
            };
            let mut point = input.data().to_vec();
            params.flatten_into(&mut point);
            let op = FnOp::new(
                |x: &[Real]| {
                    let (t, q) = unpack(x);
                    Ok(conv2d(&t, &q)?.into_data())
                },
                |x: &[Real], cot: &[Real]| {
                    let (t, q) = unpack(x);
                    let (oh, ow) = q.output_dims(6, 5).unwrap();
                    let g = Tensor::from_raw(oh, ow, 3, cot.to_vec());
                    let grads = conv2d_backward(&t, &q, &g)?;
                    let mut out = grads.input.into_data();
                    out.extend(grads.kernel);
                    out.extend(grads.bias);
                    assert_eq!(out.len(), n_in + n_k + 3);
                    Ok(out)
                },
            );
            let err = grad_check(&op, &point, 1e-5).unwrap();
            assert!(err < 1e-8, "k={k} s={stride}: {err}");
        }
    }
}
