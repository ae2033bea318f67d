//! Exact top-K matching over all pairs of positions.

use rayon::prelude::*;

use super::field::{CorrField, Point};
use crate::error::{Error, Result};
use crate::ops::{cosine_with_norms, norm};
use crate::tensor::{Real, Tensor};

/// Default ceiling on the similarity matrix, in bytes.
pub const DEFAULT_EXHAUSTIVE_CAP: usize = 3 << 30;

/// Bytes needed for the full similarity matrix between `nx` source and `ny`
/// target positions.
pub fn similarity_matrix_bytes(nx: usize, ny: usize) -> usize {
    nx.saturating_mul(ny).saturating_mul(std::mem::size_of::<Real>())
}

/// [`exhaustive_match_capped`] with [`DEFAULT_EXHAUSTIVE_CAP`].
pub fn exhaustive_match(fx: &Tensor, fy: &Tensor, k: usize) -> Result<CorrField> {
    exhaustive_match_capped(fx, fy, k, DEFAULT_EXHAUSTIVE_CAP)
}

/// Materializes every pairwise cosine similarity between `fx` and `fy` and
/// keeps the `k` best targets per source position.
pub fn exhaustive_match_capped(fx: &Tensor, fy: &Tensor, k: usize, cap_bytes: usize) -> Result<CorrField> {
    if fx.channels() != fy.channels() {
        return Err(Error::shape("exhaustive_match", fx.shape(), fy.shape()));
    }
    let (nx, ny) = (fx.height() * fx.width(), fy.height() * fy.width());
    if k == 0 || k > ny {
        return Err(Error::invalid(
            "exhaustive_match",
            format!("K = {k} must lie in 1..={ny} (target positions)"),
        ));
    }
    let required = similarity_matrix_bytes(nx, ny);
    if required > cap_bytes {
        return Err(Error::MemoryCap {
            required,
            cap: cap_bytes,
        });
    }

    let nyn: Vec<Real> = (0..ny).map(|q| norm(fy.site(q))).collect();
    let mut sim = vec![0.0 as Real; nx * ny];
    sim.par_chunks_mut(ny).enumerate().for_each(|(p, row)| {
        let a = fx.site(p);
        let na = norm(a);
        for (q, s) in row.iter_mut().enumerate() {
            *s = cosine_with_norms(a, na, fy.site(q), nyn[q]);
        }
    });

    let w = fy.width();
    let mut coords = vec![[0.0; 2]; nx * k];
    let mut scores = vec![0.0; nx * k];
    coords
        .par_chunks_mut(k)
        .zip(scores.par_chunks_mut(k))
        .zip(sim.par_chunks(ny))
        .for_each(|((c, s), row)| {
            let best = top_k(row, k);
            for (j, &(q, v)) in best.iter().enumerate() {
                c[j] = [(q % w) as Real, (q / w) as Real] as Point;
                s[j] = v;
            }
        });
    Ok(CorrField::from_parts(
        (fx.height(), fx.width(), k),
        (fy.height(), fy.width()),
        coords,
        scores,
    ))
}

/// The `k` largest entries of `row` as `(index, value)`, best first, with
/// ties going to the smaller index.
fn top_k(row: &[Real], k: usize) -> Vec<(usize, Real)> {
    let mut best: Vec<(usize, Real)> = Vec::with_capacity(k + 1);
    for (q, &v) in row.iter().enumerate() {
        if best.len() == k && v <= best[k - 1].1 {
            continue;
        }
        // Later indices lose ties, so insert after every entry >= v.
        let pos = best.partition_point(|&(_, b)| b >= v);
        best.insert(pos, (q, v));
        best.truncate(k);
    }
    best
}
