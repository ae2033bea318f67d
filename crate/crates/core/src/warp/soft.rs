//! Top-K soft warping and the correspondence loss.

use rayon::prelude::*;

use crate::error::{Error, Result, Shape};
use crate::matcher::{CorrField, Point};
use crate::ops::{
    bilinear_backward_location, bilinear_backward_map, bilinear_sample_into, downsample_to,
    similarity::softmax_unchecked, softmax_backward,
};
use crate::pyramid::ImageRgb;
use crate::tensor::{Real, Tensor};

/// The exemplar warped onto the source grid of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult {
    pub image: Tensor,
    /// Softmax weights, `K` per position, in field order.
    pub weights: Vec<Real>,
    pub temperature: Real,
}

/// Gradients of [`soft_warp`] with respect to its inputs.
#[derive(Clone, Debug)]
pub struct WarpGrads {
    pub exemplar: Tensor,
    pub coords: Vec<Point>,
    pub scores: Vec<Real>,
}

fn check(exemplar: &Tensor, field: &CorrField, temperature: Real) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(
            "soft_warp",
            format!("temperature must be positive, got {temperature}"),
        ));
    }
    if exemplar.height() != field.target_height() || exemplar.width() != field.target_width() {
        return Err(Error::shape(
            "soft_warp",
            format!("{}x{} exemplar", field.target_height(), field.target_width()),
            exemplar.shape(),
        ));
    }
    Ok(())
}

/// `w(p) = sum_k softmax(S(p, .) / tau)_k * exemplar(H(p, k))`, with bilinear
/// lookups.
pub fn soft_warp(exemplar: &Tensor, field: &CorrField, temperature: Real) -> Result<WarpResult> {
    check(exemplar, field, temperature)?;
    let (h, w, k, c) = (field.height(), field.width(), field.k(), exemplar.channels());
    let mut image = vec![0.0; h * w * c];
    let mut weights = vec![0.0; h * w * k];
    image
        .par_chunks_mut(w * c)
        .zip(weights.par_chunks_mut(w * k))
        .enumerate()
        .for_each(|(y, (row, wrow))| {
            let mut sample = vec![0.0; c];
            for x in 0..w {
                let p = y * w + x;
                let (coords, scores) = field.candidates(p);
                let wts = softmax_unchecked(scores, temperature);
                let out = &mut row[x * c..(x + 1) * c];
                for (j, (q, &a)) in coords.iter().zip(&wts).enumerate() {
                    bilinear_sample_into(exemplar, q[0], q[1], &mut sample);
                    for (o, s) in out.iter_mut().zip(&sample) {
                        *o += a * s;
                    }
                    wrow[x * k + j] = a;
                }
            }
        });
    Ok(WarpResult {
        image: Tensor::from_raw(h, w, c, image),
        weights,
        temperature,
    })
}

pub fn soft_warp_backward(
    exemplar: &Tensor,
    field: &CorrField,
    result: &WarpResult,
    grad_out: &Tensor,
) -> Result<WarpGrads> {
    check(exemplar, field, result.temperature)?;
    let c = exemplar.channels();
    grad_out.expect_shape("soft_warp_backward", Shape(field.height(), field.width(), c))?;
    let k = field.k();
    let mut d_exemplar = Tensor::zeros(exemplar.height(), exemplar.width(), c);
    let mut d_coords = vec![[0.0; 2]; field.coords().len()];
    let mut d_scores = vec![0.0; field.scores().len()];
    let mut sample = vec![0.0; c];
    let mut d_sample = vec![0.0; c];
    let mut d_w = vec![0.0; k];
    for p in 0..field.positions() {
        let g = grad_out.site(p);
        let (coords, _) = field.candidates(p);
        let wts = &result.weights[p * k..(p + 1) * k];
        for (j, q) in coords.iter().enumerate() {
            bilinear_sample_into(exemplar, q[0], q[1], &mut sample);
            d_w[j] = g.iter().zip(&sample).map(|(a, b)| a * b).sum();
            for (d, gv) in d_sample.iter_mut().zip(g) {
                *d = wts[j] * gv;
            }
            bilinear_backward_map(&mut d_exemplar, q[0], q[1], &d_sample);
            d_coords[p * k + j] = bilinear_backward_location(exemplar, q[0], q[1], &d_sample);
        }
        let ds = softmax_backward(wts, &d_w, result.temperature);
        d_scores[p * k..(p + 1) * k].copy_from_slice(&ds);
    }
    Ok(WarpGrads {
        exemplar: d_exemplar,
        coords: d_coords,
        scores: d_scores,
    })
}

/// The target image brought to each warp's resolution by repeated 2x2
/// averaging.
pub fn downsampled_targets(warps: &[Tensor], target: &ImageRgb) -> Result<Vec<Tensor>> {
    warps
        .iter()
        .map(|w| {
            if w.channels() != 3 {
                return Err(Error::shape("corr_loss", Shape(w.height(), w.width(), 3), w.shape()));
            }
            downsample_to(target.tensor(), w.height(), w.width())
        })
        .collect()
}

/// Sum over levels of the mean absolute difference between each warp and
/// the target downsampled to its size.
pub fn corr_loss(warps: &[Tensor], target: &ImageRgb) -> Result<Real> {
    let targets = downsampled_targets(warps, target)?;
    Ok(warps
        .iter()
        .zip(&targets)
        .map(|(w, t)| {
            let s: Real = w.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum();
            s / w.len() as Real
        })
        .sum())
}

/// Gradient of [`corr_loss`] with respect to every warp.
pub fn corr_loss_backward(warps: &[Tensor], target: &ImageRgb) -> Result<Vec<Tensor>> {
    let targets = downsampled_targets(warps, target)?;
    Ok(warps
        .iter()
        .zip(&targets)
        .map(|(w, t)| {
            let n = w.len() as Real;
            let data = w
                .data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| {
                    if a > b {
                        1.0 / n
                    } else if a < b {
                        -1.0 / n
                    } else {
                        0.0
                    }
                })
                .collect();
            Tensor::from_raw(w.height(), w.width(), w.channels(), data)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, FnOp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exemplar(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(5, 6, 3, |_, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn single_candidate_is_a_gather() {
        let ex = exemplar(1);
        let field = CorrField::new(1, 2, 1, 5, 6, vec![[2.0, 3.0], [0.5, 0.0]], vec![0.3, 0.1]).unwrap();
        let r = soft_warp(&ex, &field, 1.0).unwrap();
        assert_eq!(r.image.pixel(0, 0), ex.pixel(3, 2));
        for c in 0..3 {
            let mid = 0.5 * (ex.get(0, 0, c) + ex.get(0, 1, c));
            assert!((r.image.get(0, 1, c) - mid).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_scores_average_and_cold_limit_is_hard() {
        let ex = exemplar(2);
        let field = CorrField::new(1, 1, 2, 5, 6, vec![[1.0, 0.0], [4.0, 2.0]], vec![0.5, 0.5]).unwrap();
        let r = soft_warp(&ex, &field, 0.3).unwrap();
        for c in 0..3 {
            let avg = 0.5 * (ex.get(0, 1, c) + ex.get(2, 4, c));
            assert!((r.image.get(0, 0, c) - avg).abs() < 1e-12);
        }
        let field = CorrField::new(1, 1, 2, 5, 6, vec![[4.0, 2.0], [1.0, 0.0]], vec![0.9, 0.5]).unwrap();
        let r = soft_warp(&ex, &field, 1e-4).unwrap();
        assert_eq!(r.image.pixel(0, 0), ex.pixel(2, 4));
        assert!(soft_warp(&ex, &field, 0.0).is_err());
        assert!(soft_warp(&Tensor::zeros(4, 6, 3), &field, 1.0).is_err());
    }

    fn random_field(seed: u64) -> CorrField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 3;
        let mut coords = Vec::new();
        let mut scores = Vec::new();
        for _ in 0..4 * 4 {
            let mut c: Vec<Point> = (0..k).map(|_| [rng.gen_range(0.1..4.9), rng.gen_range(0.1..3.9)]).collect();
            let mut s: Vec<Real> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            crate::matcher::field::sort_position(&mut c, &mut s);
            coords.extend(c);
            scores.extend(s);
        }
        CorrField::new(4, 4, k, 5, 6, coords, scores).unwrap()
    }

    #[test]
    fn gradient_wrt_scores_coords_and_exemplar() {
        let ex = exemplar(3);
        let field = random_field(4);
        let tau = 0.5;
        let n = field.coords().len();
        let split = |x: &[Real]| {
            let coords: Vec<Point> = (0..n).map(|i| [x[2 * i], x[2 * i + 1]]).collect();
            let scores = x[2 * n..3 * n].to_vec();
            let ex = Tensor::from_raw(5, 6, 3, x[3 * n..].to_vec());
            (CorrField::from_parts((4, 4, 3), (5, 6), coords, scores), ex)
        };
        let op = FnOp::new(
            |x: &[Real]| {
                let (f, e) = split(x);
                Ok(soft_warp(&e, &f, tau)?.image.into_data())
            },
            |x: &[Real], cot: &[Real]| {
                let (f, e) = split(x);
                let r = soft_warp(&e, &f, tau)?;
                let g = soft_warp_backward(&e, &f, &r, &Tensor::from_raw(4, 4, 3, cot.to_vec()))?;
                let mut out: Vec<Real> = g.coords.iter().flat_map(|c| [c[0], c[1]]).collect();
                out.extend(g.scores);
                out.extend(g.exemplar.into_data());
                Ok(out)
            },
        );
        let mut point: Vec<Real> = field.coords().iter().flat_map(|c| [c[0], c[1]]).collect();
        point.extend_from_slice(field.scores());
        point.extend_from_slice(ex.data());
        let err = grad_check(&op, &point, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn corr_loss_examples() {
        let img = ImageRgb::from_fn(8, 8, |y, x, c| ((x + 2 * y + c) % 7) as Real / 7.0);
        let warps: Vec<Tensor> = [2usize, 4, 8]
            .iter()
            .map(|&s| downsample_to(img.tensor(), s, s).unwrap())
            .collect();
        assert_eq!(corr_loss(&warps, &img).unwrap(), 0.0);
        let shifted: Vec<Tensor> = warps.iter().map(|w| w.map(|v| v + 0.25)).collect();
        assert!((corr_loss(&shifted, &img).unwrap() - 3.0 * 0.25).abs() < 1e-12);
        assert!(corr_loss(&[Tensor::zeros(3, 3, 3)], &img).is_err());
    }

    #[test]
    fn corr_loss_gradient() {
        let img = ImageRgb::from_fn(4, 4, |y, x, c| ((x * 3 + y + c) % 5) as Real / 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w0 = Tensor::from_fn(2, 2, 3, |_, _, _| rng.gen_range(0.0..1.0));
        let w1 = Tensor::from_fn(4, 4, 3, |_, _, _| rng.gen_range(0.0..1.0));
        let split = |x: &[Real]| {
            vec![
                Tensor::from_raw(2, 2, 3, x[..12].to_vec()),
                Tensor::from_raw(4, 4, 3, x[12..].to_vec()),
            ]
        };
        let op = FnOp::new(
            |x: &[Real]| Ok(vec![corr_loss(&split(x), &img)?]),
            |x: &[Real], c: &[Real]| {
                let g = corr_loss_backward(&split(x), &img)?;
                Ok(g.iter().flat_map(|t| t.data().iter().map(|v| v * c[0])).collect())
            },
        );
        let mut point = w0.into_data();
        point.extend(w1.into_data());
        assert!(grad_check(&op, &point, 1e-6).unwrap() < 1e-6);
    }
}
