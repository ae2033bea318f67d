//! Central finite-difference verification of hand-written vjps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Real;

/// A pure function `R^n -> R^m` together with its vector-Jacobian product.
pub trait VjpOp {
    fn eval(&self, x: &[Real]) -> Result<Vec<Real>>;
    /// `cotangent^T J(x)`, a vector of length `x.len()`.
    fn vjp(&self, x: &[Real], cotangent: &[Real]) -> Result<Vec<Real>>;
}

/// Adapts a pair of closures to [`VjpOp`].
pub struct FnOp<F, B> {
    forward: F,
    backward: B,
}

impl<F, B> FnOp<F, B>
where
    F: Fn(&[Real]) -> Result<Vec<Real>>,
    B: Fn(&[Real], &[Real]) -> Result<Vec<Real>>,
{
    pub fn new(forward: F, backward: B) -> Self {
        FnOp { forward, backward }
    }
}

impl<F, B> VjpOp for FnOp<F, B>
where
    F: Fn(&[Real]) -> Result<Vec<Real>>,
    B: Fn(&[Real], &[Real]) -> Result<Vec<Real>>,
{
    fn eval(&self, x: &[Real]) -> Result<Vec<Real>> {
        (self.forward)(x)
    }
    fn vjp(&self, x: &[Real], cotangent: &[Real]) -> Result<Vec<Real>> {
        (self.backward)(x, cotangent)
    }
}

pub const DEFAULT_SEED: u64 = 0x5eed;

/// Maximum relative error between the analytic vjp and central differences,
/// using `|a - n| / max(1, |a|, |n|)` per input coordinate. The cotangent is
/// a fixed pseudo-random vector.
pub fn grad_check(op: &dyn VjpOp, point: &[Real], epsilon: Real) -> Result<Real> {
    grad_check_seeded(op, point, epsilon, DEFAULT_SEED)
}

pub fn grad_check_seeded(op: &dyn VjpOp, point: &[Real], epsilon: Real, seed: u64) -> Result<Real> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("grad_check", "epsilon must be positive"));
    }
    if point.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let y = op.eval(point)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cotangent: Vec<Real> = (0..y.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let analytic = op.vjp(point, &cotangent)?;
    if analytic.len() != point.len() {
        return Err(Error::shape(
            "grad_check",
            format!("vjp of length {}", point.len()),
            format!("length {}", analytic.len()),
        ));
    }

    let project = |x: &[Real]| -> Result<Real> {
        let out = op.eval(x)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(out.iter().zip(&cotangent).map(|(a, b)| a * b).sum())
    };

    let mut x = point.to_vec();
    let mut worst: Real = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let plus = project(&x)?;
        x[i] = orig - epsilon;
        let minus = project(&x)?;
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        if !a.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        let rel = (a - numeric).abs() / (1.0 as Real).max(a.abs()).max(numeric.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}
