use crate::error::{Error, Result};
use crate::tensor::Real;

/// Norms below this are treated as zero vectors, whose cosine is defined as 0.
pub const NORM_EPS: Real = 1e-12;

/// Dot product with four independent accumulators. Every similarity in the
/// crate goes through this function so that scores computed along different
/// code paths are bit-identical.
#[inline]
pub fn dot(a: &[Real], b: &[Real]) -> Real {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0 as Real; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn norm(a: &[Real]) -> Real {
    dot(a, a).sqrt()
}

/// Cosine from precomputed norms; identical to [`cosine_similarity`] when the
/// norms come from [`norm`].
#[inline]
pub fn cosine_with_norms(a: &[Real], na: Real, b: &[Real], nb: Real) -> Real {
    if na < NORM_EPS || nb < NORM_EPS {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

pub fn cosine_similarity(a: &[Real], b: &[Real]) -> Result<Real> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("length {}", a.len()),
            format!("length {}", b.len()),
        ));
    }
    Ok(cosine_with_norms(a, norm(a), b, norm(b)))
}

/// Accumulates `g * d cos(a, b)` into `da` and `db`. Zero for degenerate inputs.
pub fn cosine_backward_into(a: &[Real], b: &[Real], g: Real, da: &mut [Real], db: &mut [Real]) {
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_EPS || nb < NORM_EPS || g == 0.0 {
        return;
    }
    let inv = 1.0 / (na * nb);
    let c = dot(a, b) * inv;
    let (sa, sb) = (c / (na * na), c / (nb * nb));
    for i in 0..a.len() {
        da[i] += g * (b[i] * inv - sa * a[i]);
        db[i] += g * (a[i] * inv - sb * b[i]);
    }
}

pub fn cosine_backward(a: &[Real], b: &[Real], g: Real) -> Result<(Vec<Real>, Vec<Real>)> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine_backward",
            format!("length {}", a.len()),
            format!("length {}", b.len()),
        ));
    }
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; b.len()];
    cosine_backward_into(a, b, g, &mut da, &mut db);
    Ok((da, db))
}

/// Softmax of `scores / temperature`, stabilised by subtracting the maximum.
pub fn softmax_weights(scores: &[Real], temperature: Real) -> Result<Vec<Real>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(
            "softmax_weights",
            format!("temperature must be positive, got {temperature}"),
        ));
    }
    if scores.is_empty() {
        return Err(Error::invalid("softmax_weights", "need at least one score"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "softmax_weights" });
    }
    Ok(softmax_unchecked(scores, temperature))
}

pub(crate) fn softmax_unchecked(scores: &[Real], temperature: Real) -> Vec<Real> {
    let max = scores.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut w: Vec<Real> = scores
        .iter()
        .map(|&s| ((s - max) / temperature).exp())
        .collect();
    let sum: Real = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Gradient of the softmax with respect to the scores, given its output weights.
pub fn softmax_backward(weights: &[Real], grad_weights: &[Real], temperature: Real) -> Vec<Real> {
    let inner: Real = weights.iter().zip(grad_weights).map(|(w, g)| w * g).sum();
    weights
        .iter()
        .zip(grad_weights)
        .map(|(w, g)| w * (g - inner) / temperature)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, FnOp};
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]).unwrap();
        assert!((c - 0.8).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[2.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let w = softmax_weights(&[0.3; 4], 1.0).unwrap();
        for v in &w {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let w = softmax_weights(&[0.0, (2.0 as Real).ln()], 1.0).unwrap();
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-15);
        let w = softmax_weights(&[0.1, 0.9, 0.5], 1e-6).unwrap();
        assert_eq!(w, vec![0.0, 1.0, 0.0]);
        assert!(softmax_weights(&[1.0], 0.0).is_err());
        assert!(softmax_weights(&[1.0], -1.0).is_err());
    }

    #[test]
    fn cosine_gradient() {
        let op = FnOp::new(
            |x: &[Real]| Ok(vec![cosine_similarity(&x[..5], &x[5..])?]),
            |x: &[Real], c: &[Real]| {
                let (da, db) = cosine_backward(&x[..5], &x[5..], c[0])?;
                Ok([da, db].concat())
            },
        );
        let p = [0.3, -1.2, 0.8, 0.05, 2.0, 1.1, 0.4, -0.3, 0.9, -0.6];
        assert!(grad_check(&op, &p, 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn softmax_gradient() {
        for &tau in &[1.0, 0.3] {
            let op = FnOp::new(
                move |x: &[Real]| softmax_weights(x, tau),
                move |x: &[Real], c: &[Real]| {
                    let w = softmax_weights(x, tau)?;
                    Ok(softmax_backward(&w, c, tau))
                },
            );
            let p = [0.2, -0.4, 0.9, 0.1, 0.55];
            assert!(grad_check(&op, &p, 1e-5).unwrap() < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(
            scores in proptest::collection::vec(-1.0f64..1.0, 2..20),
            tau in 0.05f64..5.0,
        ) {
            let scores: Vec<Real> = scores.into_iter().map(|s| s as Real).collect();
            let w = softmax_weights(&scores, tau as Real).unwrap();
            let sum: Real = w.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn cosine_is_bounded_and_symmetric(
            a in proptest::collection::vec(-10.0f64..10.0, 6),
            b in proptest::collection::vec(-10.0f64..10.0, 6),
        ) {
            let a: Vec<Real> = a.into_iter().map(|v| v as Real).collect();
            let b: Vec<Real> = b.into_iter().map(|v| v as Real).collect();
            let ab = cosine_similarity(&a, &b).unwrap();
            let ba = cosine_similarity(&b, &a).unwrap();
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
        }
    }
}
