use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::ops::{bilinear_sample_into, cosine_with_norms, norm};
use crate::tensor::{Real, Tensor};

/// A continuous location `(x, y)` in pixel units.
pub type Point = [Real; 2];

/// Per-position top-K candidate locations into a target map, with scores.
///
/// Candidates at a position are stored best first: scores non-increasing,
/// ties broken by the smaller linear index `y * W + x` of the coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrField {
    height: usize,
    width: usize,
    k: usize,
    target_height: usize,
    target_width: usize,
    coords: Vec<Point>,
    scores: Vec<Real>,
}

/// Candidate order: higher score first, then smaller `y`, then smaller `x`.
#[inline]
pub(crate) fn candidate_cmp(sa: Real, a: &Point, sb: Real, b: &Point) -> Ordering {
    sb.total_cmp(&sa)
        .then_with(|| a[1].total_cmp(&b[1]))
        .then_with(|| a[0].total_cmp(&b[0]))
}

impl CorrField {
    pub fn new(
        height: usize,
        width: usize,
        k: usize,
        target_height: usize,
        target_width: usize,
        coords: Vec<Point>,
        scores: Vec<Real>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || k == 0 || target_height == 0 || target_width == 0 {
            return Err(Error::invalid("field", "dimensions and K must be positive"));
        }
        let n = height * width * k;
        if coords.len() != n || scores.len() != n {
            return Err(Error::shape(
                "field",
                format!("{n} candidates"),
                format!("{} coords and {} scores", coords.len(), scores.len()),
            ));
        }
        let field = CorrField {
            height,
            width,
            k,
            target_height,
            target_width,
            coords,
            scores,
        };
        field.validate()?;
        Ok(field)
    }

    /// Like [`CorrField::new`], but sorts each position's candidates first.
    pub fn from_unsorted(
        height: usize,
        width: usize,
        k: usize,
        target_height: usize,
        target_width: usize,
        mut coords: Vec<Point>,
        mut scores: Vec<Real>,
    ) -> Result<Self> {
        if k > 0 && coords.len() == scores.len() && coords.len() % k == 0 {
            for (c, s) in coords.chunks_mut(k).zip(scores.chunks_mut(k)) {
                sort_position(c, s);
            }
        }
        Self::new(height, width, k, target_height, target_width, coords, scores)
    }

    pub(crate) fn from_parts(
        dims: (usize, usize, usize),
        target: (usize, usize),
        coords: Vec<Point>,
        scores: Vec<Real>,
    ) -> Self {
        debug_assert_eq!(coords.len(), dims.0 * dims.1 * dims.2);
        CorrField {
            height: dims.0,
            width: dims.1,
            k: dims.2,
            target_height: target.0,
            target_width: target.1,
            coords,
            scores,
        }
    }

    /// Every candidate points at its own position, with score 1.
    pub fn identity(height: usize, width: usize, k: usize) -> Result<Self> {
        let mut coords = Vec::with_capacity(height * width * k);
        for y in 0..height {
            for x in 0..width {
                coords.extend(std::iter::repeat([x as Real, y as Real]).take(k));
            }
        }
        let n = coords.len();
        CorrField::new(height, width, k, height, width, coords, vec![1.0; n])
    }

    /// Checks bounds, score range and per-position ordering.
    pub fn validate(&self) -> Result<()> {
        let (hx, hy) = ((self.target_width - 1) as Real, (self.target_height - 1) as Real);
        for (i, c) in self.coords.iter().enumerate() {
            if !(c[0].is_finite() && c[1].is_finite()) {
                return Err(Error::NonFinite { op: "field" });
            }
            if c[0] < 0.0 || c[0] > hx || c[1] < 0.0 || c[1] > hy {
                return Err(Error::invalid(
                    "field",
                    format!("candidate {i} at ({}, {}) lies outside the target", c[0], c[1]),
                ));
            }
        }
        for (i, s) in self.scores.iter().enumerate() {
            if !(-1.0..=1.0).contains(s) {
                return Err(Error::invalid("field", format!("score {s} of candidate {i} outside [-1, 1]")));
            }
        }
        for p in 0..self.height * self.width {
            let (c, s) = self.candidates(p);
            for j in 1..self.k {
                if candidate_cmp(s[j - 1], &c[j - 1], s[j], &c[j]) == Ordering::Greater {
                    return Err(Error::invalid("field", format!("candidates at position {p} are not sorted")));
                }
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn target_height(&self) -> usize {
        self.target_height
    }

    pub fn target_width(&self) -> usize {
        self.target_width
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn scores(&self) -> &[Real] {
        &self.scores
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [Point], &mut [Real]) {
        (&mut self.coords, &mut self.scores)
    }

    /// Candidates of linear position `p`, best first.
    pub fn candidates(&self, p: usize) -> (&[Point], &[Real]) {
        let r = p * self.k..(p + 1) * self.k;
        (&self.coords[r.clone()], &self.scores[r])
    }

    pub fn coord(&self, y: usize, x: usize, k: usize) -> Point {
        self.coords[(y * self.width + x) * self.k + k]
    }

    pub fn score(&self, y: usize, x: usize, k: usize) -> Real {
        self.scores[(y * self.width + x) * self.k + k]
    }

    pub fn top1(&self, y: usize, x: usize) -> Point {
        self.coord(y, x, 0)
    }

    pub fn offsets(&self) -> OffsetField {
        let mut offsets = Vec::with_capacity(self.coords.len());
        for p in 0..self.positions() {
            let (px, py) = ((p % self.width) as Real, (p / self.width) as Real);
            offsets.extend(self.candidates(p).0.iter().map(|c| [c[0] - px, c[1] - py]));
        }
        OffsetField {
            height: self.height,
            width: self.width,
            k: self.k,
            offsets,
        }
    }

    /// Mean top-1 score.
    pub fn mean_top1_score(&self) -> Real {
        let sum: Real = (0..self.positions()).map(|p| self.scores[p * self.k]).sum();
        sum / self.positions() as Real
    }

    /// Keeps only the first `k` candidates per position.
    pub fn truncated(&self, k: usize) -> Result<CorrField> {
        if k == 0 || k > self.k {
            return Err(Error::invalid("field", format!("cannot keep {k} of {} candidates", self.k)));
        }
        let mut coords = Vec::with_capacity(self.positions() * k);
        let mut scores = Vec::with_capacity(self.positions() * k);
        for p in 0..self.positions() {
            let (c, s) = self.candidates(p);
            coords.extend_from_slice(&c[..k]);
            scores.extend_from_slice(&s[..k]);
        }
        Ok(CorrField::from_parts(
            (self.height, self.width, k),
            (self.target_height, self.target_width),
            coords,
            scores,
        ))
    }
}

/// Displacement form of a [`CorrField`]: `O(p, k) = H(p, k) - p`.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    height: usize,
    width: usize,
    k: usize,
    offsets: Vec<Point>,
}

impl OffsetField {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn offsets(&self) -> &[Point] {
        &self.offsets
    }

    pub fn get(&self, y: usize, x: usize, k: usize) -> Point {
        self.offsets[(y * self.width + x) * self.k + k]
    }

    /// `H x W x 2K` tensor with channels `(dx_0, dy_0, dx_1, dy_1, ...)`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.offsets.iter().flat_map(|o| [o[0], o[1]]).collect();
        Tensor::from_raw(self.height, self.width, 2 * self.k, data)
    }
}

/// Scores candidates by cosine similarity between `fx(p)` and the bilinear
/// lookup of `fy` at the candidate location. Integer locations read the grid
/// directly, so scores agree bit-for-bit with a plain cosine of the two
/// feature vectors.
pub(crate) struct Scorer<'a> {
    pub fx: &'a Tensor,
    pub fy: &'a Tensor,
    fx_norms: Vec<Real>,
    fy_norms: Vec<Real>,
}

impl<'a> Scorer<'a> {
    pub fn new(op: &'static str, fx: &'a Tensor, fy: &'a Tensor) -> Result<Self> {
        if fx.channels() != fy.channels() {
            return Err(Error::shape(op, fx.shape(), fy.shape()));
        }
        let norms = |t: &Tensor| (0..t.height() * t.width()).map(|i| norm(t.site(i))).collect();
        Ok(Scorer {
            fx,
            fy,
            fx_norms: norms(fx),
            fy_norms: norms(fy),
        })
    }

    #[inline]
    pub fn score(&self, p: usize, c: &Point, buf: &mut [Real]) -> Real {
        let a = self.fx.site(p);
        let (x, y) = (c[0], c[1]);
        let (xi, yi) = (x as usize, y as usize);
        if xi as Real == x && yi as Real == y {
            let q = yi * self.fy.width() + xi;
            return cosine_with_norms(a, self.fx_norms[p], self.fy.site(q), self.fy_norms[q]);
        }
        bilinear_sample_into(self.fy, x, y, buf);
        cosine_with_norms(a, self.fx_norms[p], buf, norm(buf))
    }
}

/// Sorts the candidates of one position in place and returns, for every
/// output slot, the slot it came from.
pub(crate) fn sort_position(coords: &mut [Point], scores: &mut [Real]) -> Vec<u16> {
    let k = coords.len();
    let mut order: Vec<u16> = (0..k as u16).collect();
    order.sort_by(|&a, &b| {
        let (a, b) = (a as usize, b as usize);
        candidate_cmp(scores[a], &coords[a], scores[b], &coords[b])
    });
    let c: Vec<Point> = order.iter().map(|&i| coords[i as usize]).collect();
    let s: Vec<Real> = order.iter().map(|&i| scores[i as usize]).collect();
    coords.copy_from_slice(&c);
    scores.copy_from_slice(&s);
    order
}
