//! Neighbourhood propagation.
//!
//! Every position pools its own K candidates with the candidates of its four
//! neighbours re-based to itself, `H(n, k) + (p - n)`, and keeps the K best.
//! All reads come from the input field, so rows are processed in parallel and
//! the result does not depend on scheduling.

use rayon::prelude::*;

use super::field::{candidate_cmp, CorrField, Point, Scorer};
use crate::error::{Error, Result};
use crate::ops::clamp_location;
use crate::tensor::{Real, Tensor};

/// Where an output candidate of [`propagate`] came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    /// Linear position whose candidate was re-based.
    pub source: u32,
    /// Slot of that candidate at the source position.
    pub slot: u16,
    /// Axes on which the re-based location was clamped.
    pub clamped: [bool; 2],
}

const NEIGHBOURS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

pub fn propagate(field: &CorrField, fx: &Tensor, fy: &Tensor) -> Result<CorrField> {
    check_dims(field, fx, fy)?;
    let scorer = Scorer::new("propagate", fx, fy)?;
    Ok(propagate_traced(field, &scorer).0)
}

pub(crate) fn check_dims(field: &CorrField, fx: &Tensor, fy: &Tensor) -> Result<()> {
    if field.height() != fx.height() || field.width() != fx.width() {
        return Err(Error::shape(
            "propagate",
            format!("{}x{} source features", field.height(), field.width()),
            fx.shape(),
        ));
    }
    if field.target_height() != fy.height() || field.target_width() != fy.width() {
        return Err(Error::shape(
            "propagate",
            format!("{}x{} target features", field.target_height(), field.target_width()),
            fy.shape(),
        ));
    }
    Ok(())
}

struct Candidate {
    coord: Point,
    score: Real,
    prov: Provenance,
}

/// Open-addressing set of exact coordinates. Slots are tagged with a
/// generation counter so clearing is O(1).
struct CoordSet {
    slots: Vec<(u64, u64, u32)>,
    generation: u32,
    mask: usize,
}

impl CoordSet {
    fn with_capacity(n: usize) -> Self {
        let size = (4 * n).next_power_of_two().max(16);
        CoordSet {
            slots: vec![(0, 0, 0); size],
            generation: 1,
            mask: size - 1,
        }
    }

    fn clear(&mut self) {
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.slots.iter_mut().for_each(|s| s.2 = 0);
            self.generation = 1;
        }
    }

    /// Returns `false` if the coordinate was already present.
    fn insert(&mut self, c: &Point) -> bool {
        // Normalise -0.0 so that equal coordinates hash equally.
        let (a, b) = ((c[0] + 0.0).to_bits() as u64, (c[1] + 0.0).to_bits() as u64);
        let h = a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        let mut i = (h >> 40) as usize & self.mask;
        loop {
            let slot = &mut self.slots[i];
            if slot.2 != self.generation {
                *slot = (a, b, self.generation);
                return true;
            }
            if slot.0 == a && slot.1 == b {
                return false;
            }
            i = (i + 1) & self.mask;
        }
    }
}

pub(crate) fn propagate_traced(field: &CorrField, scorer: &Scorer) -> (CorrField, Vec<Provenance>) {
    let (h, w, k) = (field.height(), field.width(), field.k());
    let (th, tw) = (field.target_height(), field.target_width());
    let rows: Vec<(Vec<Point>, Vec<Real>, Vec<Provenance>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut coords = Vec::with_capacity(w * k);
            let mut scores = Vec::with_capacity(w * k);
            let mut provs = Vec::with_capacity(w * k);
            let mut buf = vec![0.0; scorer.fy.channels()];
            let mut pool: Vec<Candidate> = Vec::with_capacity(5 * k);
            let mut seen = CoordSet::with_capacity(5 * k);
            for x in 0..w {
                let p = y * w + x;
                pool.clear();
                seen.clear();
                let (own_c, own_s) = field.candidates(p);
                for (j, (&c, &s)) in own_c.iter().zip(own_s).enumerate() {
                    seen.insert(&c);
                    pool.push(Candidate {
                        coord: c,
                        score: s,
                        prov: Provenance {
                            source: p as u32,
                            slot: j as u16,
                            clamped: [false, false],
                        },
                    });
                }
                for (dx, dy) in NEIGHBOURS {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let n = ny as usize * w + nx as usize;
                    for (j, c) in field.candidates(n).0.iter().enumerate() {
                        let (coord, clamped) = clamp_location(th, tw, c[0] - dx as Real, c[1] - dy as Real);
                        if !seen.insert(&coord) {
                            continue;
                        }
                        let score = scorer.score(p, &coord, &mut buf);
                        pool.push(Candidate {
                            coord,
                            score,
                            prov: Provenance {
                                source: n as u32,
                                slot: j as u16,
                                clamped,
                            },
                        });
                    }
                }
                let cmp = |a: &Candidate, b: &Candidate| candidate_cmp(a.score, &a.coord, b.score, &b.coord);
                if pool.len() > k {
                    pool.select_nth_unstable_by(k - 1, cmp);
                }
                pool[..k].sort_unstable_by(cmp);
                for c in &pool[..k] {
                    coords.push(c.coord);
                    scores.push(c.score);
                    provs.push(c.prov);
                }
            }
            (coords, scores, provs)
        })
        .collect();
    let mut coords = Vec::with_capacity(h * w * k);
    let mut scores = Vec::with_capacity(h * w * k);
    let mut provs = Vec::with_capacity(h * w * k);
    for (c, s, p) in rows {
        coords.extend(c);
        scores.extend(s);
        provs.extend(p);
    }
    (CorrField::from_parts((h, w, k), (th, tw), coords, scores), provs)
}

/// Routes coordinate gradients of a propagated field back to the field it
/// was built from. Re-basing is a shift, so gradients pass through unchanged
/// except along clamped axes.
pub(crate) fn propagate_backward(provs: &[Provenance], k: usize, grad_out: &[Point]) -> Vec<Point> {
    let mut grad_in = vec![[0.0; 2]; grad_out.len()];
    for (prov, g) in provs.iter().zip(grad_out) {
        let d = &mut grad_in[prov.source as usize * k + prov.slot as usize];
        for a in 0..2 {
            if !prov.clamped[a] {
                d[a] += g[a];
            }
        }
    }
    grad_in
}
