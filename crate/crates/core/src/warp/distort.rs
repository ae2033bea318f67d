//! Geometric distortions for building pseudo exemplars.
//!
//! A distortion is a map `T` on pixel coordinates made of an affine part and
//! an optional thin-plate spline displacement. The distorted image samples
//! the original at `T(p)`, so the original pixel at `q` appears at
//! `T^-1(q)`; that inverse, minus `q`, is the ground-truth flow.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matcher::{CorrField, Point};
use crate::ops::{bilinear_sample_into, clamp_location};
use crate::pyramid::ImageRgb;
use crate::tensor::{Real, Tensor};

/// Largest allowed spline displacement, as a fraction of the shorter side.
pub const MAX_DISPLACEMENT_FRACTION: Real = 0.1;

const INVERSE_ITERS: usize = 100;
const INVERSE_TOL: Real = 1e-10;

/// Thin-plate spline displacements pinned at control points, both in pixel
/// coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ThinPlate {
    pub controls: Vec<Point>,
    pub displacements: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistortionSpec {
    /// Rows of `[a b tx; c d ty]`, applied as `A p + t`.
    pub affine: [[Real; 3]; 2],
    pub spline: Option<ThinPlate>,
    pub seed: u64,
}

impl Default for DistortionSpec {
    fn default() -> Self {
        DistortionSpec::identity()
    }
}

impl DistortionSpec {
    pub fn identity() -> Self {
        DistortionSpec {
            affine: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            spline: None,
            seed: 0,
        }
    }

    pub fn translation(dx: Real, dy: Real) -> Self {
        DistortionSpec {
            affine: [[1.0, 0.0, dx], [0.0, 1.0, dy]],
            ..Self::identity()
        }
    }

    /// Rotation by `angle` radians and isotropic `scale` about the image
    /// centre, followed by a shift of `(dx, dy)` pixels.
    pub fn similarity(height: usize, width: usize, angle: Real, scale: Real, dx: Real, dy: Real) -> Self {
        let (cx, cy) = ((width as Real - 1.0) / 2.0, (height as Real - 1.0) / 2.0);
        let (s, c) = angle.sin_cos();
        let (a, b, cc, d) = (scale * c, -scale * s, scale * s, scale * c);
        DistortionSpec {
            affine: [
                [a, b, cx - a * cx - b * cy + dx],
                [cc, d, cy - cc * cx - d * cy + dy],
            ],
            ..Self::identity()
        }
    }

    fn det(&self) -> Real {
        let m = &self.affine;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    /// The inverse of the affine part. Fails when the matrix is singular.
    pub fn affine_inverse(&self) -> Result<DistortionSpec> {
        let det = self.det();
        if !(det.abs() > 1e-8) || !det.is_finite() {
            return Err(Error::invalid(
                "distortion",
                format!("affine part is not invertible (determinant {det})"),
            ));
        }
        let m = &self.affine;
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        Ok(DistortionSpec {
            affine: [
                [a, b, -(a * m[0][2] + b * m[1][2])],
                [c, d, -(c * m[0][2] + d * m[1][2])],
            ],
            spline: None,
            seed: self.seed,
        })
    }

    /// Checks invertibility and, for an image of the given size, the spline
    /// displacement bound.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.affine.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "distortion" });
        }
        self.affine_inverse()?;
        if let Some(tps) = &self.spline {
            if tps.controls.len() != tps.displacements.len() {
                return Err(Error::shape(
                    "distortion",
                    format!("{} displacements", tps.controls.len()),
                    format!("{}", tps.displacements.len()),
                ));
            }
            let bound = MAX_DISPLACEMENT_FRACTION * height.min(width) as Real;
            for d in &tps.displacements {
                let m = d[0].hypot(d[1]);
                if !(m <= bound) {
                    return Err(Error::invalid(
                        "distortion",
                        format!("spline displacement {m:.3} exceeds {bound:.3} pixels"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A distortion prepared for evaluation at arbitrary points.
pub struct Distortion {
    affine: [[Real; 3]; 2],
    inverse: [[Real; 3]; 2],
    spline: Option<SplineFit>,
}

struct SplineFit {
    controls: Vec<Point>,
    scale: Real,
    /// Per output axis: radial weights then `[a0, ax, ay]`.
    coeffs: [Vec<Real>; 2],
}

fn radial(r2: Real) -> Real {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

impl SplineFit {
    fn fit(tps: &ThinPlate, height: usize, width: usize) -> Result<Self> {
        let n = tps.controls.len();
        let scale = 1.0 / height.max(width) as Real;
        let pts: Vec<Point> = tps.controls.iter().map(|c| [c[0] * scale, c[1] * scale]).collect();
        let mut m = DMatrix::<Real>::zeros(n + 3, n + 3);
        for i in 0..n {
            for j in 0..n {
                let (dx, dy) = (pts[i][0] - pts[j][0], pts[i][1] - pts[j][1]);
                m[(i, j)] = radial(dx * dx + dy * dy);
            }
            for (c, v) in [1.0, pts[i][0], pts[i][1]].into_iter().enumerate() {
                m[(i, n + c)] = v;
                m[(n + c, i)] = v;
            }
        }
        let lu = m.lu();
        let mut coeffs: [Vec<Real>; 2] = [Vec::new(), Vec::new()];
        for (axis, out) in coeffs.iter_mut().enumerate() {
            let mut rhs = DVector::<Real>::zeros(n + 3);
            for i in 0..n {
                rhs[i] = tps.displacements[i][axis];
            }
            let sol = lu.solve(&rhs).ok_or_else(|| {
                Error::invalid("distortion", "spline control points are degenerate (collinear or repeated)")
            })?;
            *out = sol.iter().copied().collect();
        }
        Ok(SplineFit {
            controls: pts,
            scale,
            coeffs,
        })
    }

    fn eval(&self, p: Point) -> Point {
        let (x, y) = (p[0] * self.scale, p[1] * self.scale);
        let n = self.controls.len();
        let mut out = [0.0; 2];
        for (axis, c) in self.coeffs.iter().enumerate() {
            let mut v = c[n] + c[n + 1] * x + c[n + 2] * y;
            for (q, w) in self.controls.iter().zip(c) {
                let (dx, dy) = (x - q[0], y - q[1]);
                v += w * radial(dx * dx + dy * dy);
            }
            out[axis] = v;
        }
        out
    }
}

fn apply_affine(m: &[[Real; 3]; 2], p: Point) -> Point {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
    ]
}

impl Distortion {
    pub fn new(spec: &DistortionSpec, height: usize, width: usize) -> Result<Self> {
        spec.validate(height, width)?;
        let spline = match &spec.spline {
            Some(tps) if !tps.controls.is_empty() => Some(SplineFit::fit(tps, height, width)?),
            _ => None,
        };
        Ok(Distortion {
            affine: spec.affine,
            inverse: spec.affine_inverse()?.affine,
            spline,
        })
    }

    /// `T(p)`: where the distorted image reads the original.
    pub fn forward(&self, p: Point) -> Point {
        let mut q = apply_affine(&self.affine, p);
        if let Some(s) = &self.spline {
            let d = s.eval(p);
            q[0] += d[0];
            q[1] += d[1];
        }
        q
    }

    /// `T^-1(q)` by fixed-point iteration on `p = A^-1 (q - t - D(p))`.
    pub fn inverse(&self, q: Point) -> Point {
        let mut p = apply_affine(&self.inverse, q);
        let Some(s) = &self.spline else {
            return p;
        };
        for _ in 0..INVERSE_ITERS {
            let d = s.eval(p);
            let next = apply_affine(&self.inverse, [q[0] - d[0], q[1] - d[1]]);
            let change = (next[0] - p[0]).abs().max((next[1] - p[1]).abs());
            p = next;
            if change < INVERSE_TOL {
                break;
            }
        }
        p
    }
}

/// Ranges for [`random_distortion`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistortionRange {
    /// Maximum rotation, radians.
    pub max_angle: Real,
    /// Maximum relative deviation of the scale from 1.
    pub max_scale: Real,
    /// Maximum shift, as a fraction of each side.
    pub max_shift: Real,
    /// Spline control grid per side; 0 disables the spline.
    pub spline_grid: usize,
    /// Maximum spline displacement, as a fraction of the shorter side.
    pub spline_fraction: Real,
}

impl Default for DistortionRange {
    fn default() -> Self {
        DistortionRange {
            max_angle: 0.15,
            max_scale: 0.1,
            max_shift: 0.06,
            spline_grid: 0,
            spline_fraction: 0.04,
        }
    }
}

impl DistortionRange {
    pub fn affine_only(self) -> Self {
        DistortionRange { spline_grid: 0, ..self }
    }
}

pub fn random_distortion(height: usize, width: usize, range: &DistortionRange, seed: u64) -> Result<DistortionSpec> {
    if range.spline_fraction > MAX_DISPLACEMENT_FRACTION {
        return Err(Error::invalid(
            "distortion",
            format!("spline fraction {} exceeds {MAX_DISPLACEMENT_FRACTION}", range.spline_fraction),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sym = |m: Real| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
    let angle = sym(range.max_angle);
    let scale = 1.0 + sym(range.max_scale);
    let dx = sym(range.max_shift) * width as Real;
    let dy = sym(range.max_shift) * height as Real;
    let mut spec = DistortionSpec::similarity(height, width, angle, scale, dx, dy);
    spec.seed = seed;
    if range.spline_grid >= 2 {
        let g = range.spline_grid;
        let bound = range.spline_fraction * height.min(width) as Real;
        let mut controls = Vec::with_capacity(g * g);
        let mut displacements = Vec::with_capacity(g * g);
        for j in 0..g {
            for i in 0..g {
                controls.push([
                    i as Real * (width - 1) as Real / (g - 1) as Real,
                    j as Real * (height - 1) as Real / (g - 1) as Real,
                ]);
                let r = bound * rng.gen_range(0.0..1.0 as Real).sqrt();
                let t = rng.gen_range(0.0..std::f64::consts::TAU as Real);
                displacements.push([r * t.cos(), r * t.sin()]);
            }
        }
        spec.spline = Some(ThinPlate { controls, displacements });
    }
    spec.validate(height, width)?;
    Ok(spec)
}

/// Distorts `image` by `spec` and returns the dense ground-truth flow
/// (`H x W x 2`, `(dx, dy)` per pixel): the original pixel at `q` is found
/// at `q + flow(q)` in the distorted image.
pub fn make_pseudo_exemplar(image: &ImageRgb, spec: &DistortionSpec) -> Result<(ImageRgb, Tensor)> {
    let (h, w) = (image.height(), image.width());
    let t = Distortion::new(spec, h, w)?;
    let src = image.tensor();
    let mut px = [0.0; 3];
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let q = t.forward([x as Real, y as Real]);
            bilinear_sample_into(src, q[0], q[1], &mut px);
            data.extend(px.iter().map(|v| v.clamp(0.0, 1.0)));
        }
    }
    let distorted = ImageRgb::new(Tensor::from_raw(h, w, 3, data))?;
    let flow = Tensor::from_fn(h, w, 2, |y, x, c| {
        let p = t.inverse([x as Real, y as Real]);
        p[c] - [x as Real, y as Real][c]
    });
    Ok((distorted, flow))
}

/// A one-candidate field from a dense flow, clamped to the target.
pub fn field_from_flow(flow: &Tensor, target_height: usize, target_width: usize) -> Result<CorrField> {
    if flow.channels() != 2 {
        return Err(Error::shape("field_from_flow", "HxWx2", flow.shape()));
    }
    let (h, w) = (flow.height(), flow.width());
    let coords = (0..h * w)
        .map(|p| {
            let f = flow.site(p);
            clamp_location(target_height, target_width, (p % w) as Real + f[0], (p / w) as Real + f[1]).0
        })
        .collect();
    CorrField::new(h, w, 1, target_height, target_width, coords, vec![1.0; h * w])
}

/// Peak signal-to-noise ratio in dB for values in `[0, 1]`, ignoring a
/// border of `margin` pixels.
pub fn psnr(a: &Tensor, b: &Tensor, margin: usize) -> Result<Real> {
    if !a.same_shape(b) {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    let (h, w) = (a.height(), a.width());
    if 2 * margin >= h.min(w) {
        return Err(Error::invalid("psnr", format!("margin {margin} leaves no pixels")));
    }
    let mut se = 0.0;
    let mut n = 0usize;
    for y in margin..h - margin {
        for x in margin..w - margin {
            for (u, v) in a.pixel(y, x).iter().zip(b.pixel(y, x)) {
                se += (u - v) * (u - v);
                n += 1;
            }
        }
    }
    let mse = se / n as Real;
    Ok(if mse == 0.0 { Real::INFINITY } else { -10.0 * mse.log10() })
}
