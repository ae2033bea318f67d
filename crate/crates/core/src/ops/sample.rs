//! Bilinear lookups at continuous locations and 2x resampling.
//!
//! Locations are `(x, y)` in pixel units and are clamped to
//! `[0, W-1] x [0, H-1]`. Inside that box the lookup is the usual bilinear
//! blend of the four enclosing cells; outside it the border value is
//! returned and the location gradient is zero along the clamped axis.

use crate::error::{Error, Result, Shape};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: Real,
    fy: Real,
    free_x: bool,
    free_y: bool,
}

fn axis(v: Real, len: usize) -> (usize, usize, Real, bool) {
    let hi = (len - 1) as Real;
    let free = (0.0..=hi).contains(&v);
    let c = v.clamp(0.0, hi);
    let i0 = (c.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, c - i0 as Real, free)
}

#[inline]
pub(crate) fn taps(height: usize, width: usize, x: Real, y: Real) -> Taps {
    let (x0, x1, fx, free_x) = axis(x, width);
    let (y0, y1, fy, free_y) = axis(y, height);
    Taps {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        free_x,
        free_y,
    }
}

/// Clamps a location into the sampling box, reporting which axes were clamped.
#[inline]
pub fn clamp_location(height: usize, width: usize, x: Real, y: Real) -> ([Real; 2], [bool; 2]) {
    let (hx, hy) = ((width - 1) as Real, (height - 1) as Real);
    let cx = x.clamp(0.0, hx);
    let cy = y.clamp(0.0, hy);
    ([cx, cy], [cx != x, cy != y])
}

/// Writes the bilinear sample of `map` at `(x, y)` into `out`.
pub fn bilinear_sample_into(map: &Tensor, x: Real, y: Real, out: &mut [Real]) {
    let t = taps(map.height(), map.width(), x, y);
    if t.fx == 0.0 && t.fy == 0.0 {
        out.copy_from_slice(map.pixel(t.y0, t.x0));
        return;
    }
    // Nested lerps reproduce constant regions exactly.
    let (p00, p01) = (map.pixel(t.y0, t.x0), map.pixel(t.y0, t.x1));
    let (p10, p11) = (map.pixel(t.y1, t.x0), map.pixel(t.y1, t.x1));
    for c in 0..out.len() {
        let top = p00[c] + t.fx * (p01[c] - p00[c]);
        let bottom = p10[c] + t.fx * (p11[c] - p10[c]);
        out[c] = top + t.fy * (bottom - top);
    }
}

pub fn bilinear_sample(map: &Tensor, x: Real, y: Real) -> Vec<Real> {
    let mut out = vec![0.0; map.channels()];
    bilinear_sample_into(map, x, y, &mut out);
    out
}

/// Scatters `grad` (one value per channel) back onto the map cells that
/// [`bilinear_sample`] read at `(x, y)`.
pub fn bilinear_backward_map(grad_map: &mut Tensor, x: Real, y: Real, grad: &[Real]) {
    let t = taps(grad_map.height(), grad_map.width(), x, y);
    let w00 = (1.0 - t.fx) * (1.0 - t.fy);
    let w01 = t.fx * (1.0 - t.fy);
    let w10 = (1.0 - t.fx) * t.fy;
    let w11 = t.fx * t.fy;
    for (yy, xx, w) in [
        (t.y0, t.x0, w00),
        (t.y0, t.x1, w01),
        (t.y1, t.x0, w10),
        (t.y1, t.x1, w11),
    ] {
        if w == 0.0 {
            continue;
        }
        for (d, g) in grad_map.pixel_mut(yy, xx).iter_mut().zip(grad) {
            *d += w * g;
        }
    }
}

/// Gradient of `grad . bilinear_sample(map, x, y)` with respect to `(x, y)`.
pub fn bilinear_backward_location(map: &Tensor, x: Real, y: Real, grad: &[Real]) -> [Real; 2] {
    let t = taps(map.height(), map.width(), x, y);
    let (p00, p01) = (map.pixel(t.y0, t.x0), map.pixel(t.y0, t.x1));
    let (p10, p11) = (map.pixel(t.y1, t.x0), map.pixel(t.y1, t.x1));
    let (mut dx, mut dy) = (0.0, 0.0);
    for c in 0..grad.len() {
        let g = grad[c];
        dx += g * ((1.0 - t.fy) * (p01[c] - p00[c]) + t.fy * (p11[c] - p10[c]));
        dy += g * ((1.0 - t.fx) * (p10[c] - p00[c]) + t.fx * (p11[c] - p01[c]));
    }
    [
        if t.free_x { dx } else { 0.0 },
        if t.free_y { dy } else { 0.0 },
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

#[inline]
fn up_source(i: usize) -> Real {
    (i as Real + 0.5) * 0.5 - 0.5
}

/// `Up`: bilinear 2x upsampling with half-pixel centres.
/// `Down`: 2x2 average pooling, which needs even dimensions.
pub fn resample2x(input: &Tensor, direction: Direction) -> Result<Tensor> {
    let (h, w, c) = (input.height(), input.width(), input.channels());
    match direction {
        Direction::Up => {
            let mut out = Tensor::zeros(2 * h, 2 * w, c);
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    bilinear_sample_into(input, up_source(ox), up_source(oy), out.pixel_mut(oy, ox));
                }
            }
            Ok(out)
        }
        Direction::Down => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::NotDivisible {
                    what: "2x downsampling",
                    dim: if h % 2 != 0 { h } else { w },
                    divisor: 2,
                });
            }
            let mut out = Tensor::zeros(h / 2, w / 2, c);
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let (a, b) = (input.pixel(2 * oy, 2 * ox), input.pixel(2 * oy, 2 * ox + 1));
                    let (d, e) = (input.pixel(2 * oy + 1, 2 * ox), input.pixel(2 * oy + 1, 2 * ox + 1));
                    let px = out.pixel_mut(oy, ox);
                    for ch in 0..c {
                        px[ch] = 0.25 * ((a[ch] + b[ch]) + (d[ch] + e[ch]));
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Vjp of [`resample2x`]; `input_shape` is the shape of the forward input.
pub fn resample2x_backward(input_shape: Shape, direction: Direction, grad_out: &Tensor) -> Result<Tensor> {
    let Shape(h, w, c) = input_shape;
    match direction {
        Direction::Up => {
            grad_out.expect_shape("resample2x_backward", Shape(2 * h, 2 * w, c))?;
            let mut g = Tensor::zeros(h, w, c);
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    bilinear_backward_map(&mut g, up_source(ox), up_source(oy), grad_out.pixel(oy, ox));
                }
            }
            Ok(g)
        }
        Direction::Down => {
            grad_out.expect_shape("resample2x_backward", Shape(h / 2, w / 2, c))?;
            let mut g = Tensor::zeros(h, w, c);
            for y in 0..h {
                for x in 0..w {
                    let src = grad_out.pixel(y / 2, x / 2);
                    for (d, s) in g.pixel_mut(y, x).iter_mut().zip(src) {
                        *d = 0.25 * s;
                    }
                }
            }
            Ok(g)
        }
    }
}

/// Repeated 2x2 averaging until the tensor is `height x width`.
pub fn downsample_to(input: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let mut cur = input.clone();
    while cur.height() > height || cur.width() > width {
        cur = resample2x(&cur, Direction::Down)?;
    }
    if cur.height() != height || cur.width() != width {
        return Err(Error::shape(
            "downsample_to",
            format!("{height}x{width} reachable by halving"),
            input.shape(),
        ));
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, FnOp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp() -> Tensor {
        Tensor::from_fn(3, 4, 2, |y, x, c| (y * 4 + x) as Real + 100.0 * c as Real)
    }

    #[test]
    fn integer_location_is_exact() {
        let m = ramp();
        assert_eq!(bilinear_sample(&m, 2.0, 1.0), m.pixel(1, 2).to_vec());
    }

    #[test]
    fn midpoint_averages_neighbours() {
        let m = ramp();
        let v = bilinear_sample(&m, 1.5, 2.0);
        let (a, b) = (m.pixel(2, 1), m.pixel(2, 2));
        assert_eq!(v, vec![(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]);
    }

    #[test]
    fn out_of_bounds_clamps_to_border() {
        let m = ramp();
        assert_eq!(bilinear_sample(&m, -3.0, 7.5), m.pixel(2, 0).to_vec());
        assert_eq!(bilinear_sample(&m, 9.0, -1.0), m.pixel(0, 3).to_vec());
        assert_eq!(bilinear_backward_location(&m, -3.0, 1.0, &[1.0, 1.0])[0], 0.0);
    }

    #[test]
    fn resample_examples() {
        let c = Tensor::filled(4, 6, 2, 0.7);
        assert_eq!(resample2x(&c, Direction::Up).unwrap(), Tensor::filled(8, 12, 2, 0.7));
        assert_eq!(resample2x(&c, Direction::Down).unwrap(), Tensor::filled(2, 3, 2, 0.7));
        let up = resample2x(&c, Direction::Up).unwrap();
        assert_eq!(resample2x(&up, Direction::Down).unwrap(), c);

        let t = Tensor::from_vec(2, 2, 1, vec![1.0, 1.0, 3.0, 3.0]).unwrap();
        assert_eq!(resample2x(&t, Direction::Down).unwrap().data(), &[2.0]);
        assert!(matches!(
            resample2x(&Tensor::zeros(3, 2, 1), Direction::Down),
            Err(Error::NotDivisible { .. })
        ));
    }

    #[test]
    fn bilinear_gradient_wrt_map_and_location() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let map = Tensor::from_fn(4, 5, 3, |_, _, _| rng.gen_range(-1.0..1.0));
        let n = map.len();
        let op = FnOp::new(
            |x: &[Real]| {
                let m = Tensor::from_raw(4, 5, 3, x[..n].to_vec());
                Ok(bilinear_sample(&m, x[n], x[n + 1]))
            },
            |x: &[Real], c: &[Real]| {
                let m = Tensor::from_raw(4, 5, 3, x[..n].to_vec());
                let mut g = Tensor::zeros(4, 5, 3);
                bilinear_backward_map(&mut g, x[n], x[n + 1], c);
                let loc = bilinear_backward_location(&m, x[n], x[n + 1], c);
                let mut out = g.into_data();
                out.extend_from_slice(&loc);
                Ok(out)
            },
        );
        for &(lx, ly) in &[(1.3, 2.6), (0.2, 0.7), (3.55, 1.1)] {
            let mut p = map.data().to_vec();
            p.extend_from_slice(&[lx, ly]);
            assert!(grad_check(&op, &p, 1e-6).unwrap() < 1e-6);
        }
    }

    #[test]
    fn resample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for dir in [Direction::Up, Direction::Down] {
            let t = Tensor::from_fn(4, 6, 2, |_, _, _| rng.gen_range(-1.0..1.0));
            let op = FnOp::new(
                move |x: &[Real]| Ok(resample2x(&Tensor::from_raw(4, 6, 2, x.to_vec()), dir)?.into_data()),
                move |_x: &[Real], c: &[Real]| {
                    let (h, w) = match dir {
                        Direction::Up => (8, 12),
                        Direction::Down => (2, 3),
                    };
                    let g = Tensor::from_raw(h, w, 2, c.to_vec());
                    Ok(resample2x_backward(Shape(4, 6, 2), dir, &g)?.into_data())
                },
            );
            assert!(grad_check(&op, t.data(), 1e-5).unwrap() < 1e-8);
        }
    }
}
