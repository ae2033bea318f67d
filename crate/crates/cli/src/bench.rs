//! Exhaustive versus hierarchical matching on synthetic feature pairs.
//!
//! The source features are smooth random maps; the exemplar features are the
//! same maps resampled through a random translation or affine distortion, so
//! the true correspondence of every source position is known.

use std::time::Instant;

use hpmatch_core::matcher::{
    exhaustive_match_capped, exhaustive_memory_estimate, hierarchical_match, hierarchical_memory_estimate,
    CorrField, MatchConfig, Point, RefinerParams,
};
use hpmatch_core::ops::{bilinear_sample_into, resample2x, Direction};
use hpmatch_core::pyramid::{check_divisible, Pyramid};
use hpmatch_core::warp::{random_distortion, Distortion, DistortionRange, DistortionSpec};
use hpmatch_core::{Real, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BENCH_CSV_HEADER: &str = "size,channels,k,levels,iters,exhaustive_ms,hierarchical_ms,speedup,\
exhaustive_bytes,hierarchical_bytes,top1_agreement,mean_epe_hierarchical,mean_epe_exhaustive";

/// Lattice spacing of the finest noise octave, in pixels.
const FEATURE_CELL: usize = 4;

/// Sum of bilinearly interpolated random lattices whose spacing doubles
/// per octave, so that every pyramid level sees structure.
fn smooth_features(size: usize, channels: usize, octaves: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut out = Tensor::zeros(size, size, channels);
    let mut buf = vec![0.0; channels];
    for o in 0..octaves {
        let cell = FEATURE_CELL << o;
        let g = size / cell + 2;
        let lattice = Tensor::from_fn(g, g, channels, |_, _, _| rng.gen_range(-1.0..1.0));
        let s = cell as Real;
        for y in 0..size {
            for x in 0..size {
                bilinear_sample_into(&lattice, x as Real / s, y as Real / s, &mut buf);
                for (d, v) in out.pixel_mut(y, x).iter_mut().zip(&buf) {
                    *d += v;
                }
            }
        }
    }
    out
}

pub struct FeaturePair {
    pub source: Pyramid,
    pub exemplar: Pyramid,
    /// Ground-truth match of every finest-level source position.
    pub truth: Vec<Point>,
}

fn average_pyramid(finest: Tensor, levels: usize) -> Result<Pyramid> {
    let mut maps = vec![finest];
    for _ in 1..levels {
        let next = resample2x(maps.last().expect("non-empty"), Direction::Down)?;
        maps.push(next);
    }
    maps.reverse();
    Pyramid::new(maps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairKind {
    /// Integer shift of up to an eighth of the side.
    Translation,
    /// Rotation, scaling and shift from the default distortion range.
    Affine,
}

impl std::str::FromStr for PairKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "translation" => Ok(PairKind::Translation),
            "affine" => Ok(PairKind::Affine),
            _ => Err(format!("unknown pair kind {s:?} (expected translation or affine)")),
        }
    }
}

/// A source feature pyramid, its affinely distorted copy and the true
/// correspondence, all reproducible from `seed`.
pub fn synthetic_pair(size: usize, channels: usize, levels: usize, kind: PairKind, seed: u64) -> Result<FeaturePair> {
    check_divisible(size, size, levels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fx = smooth_features(size, channels, levels.max(2), &mut rng);
    let spec = match kind {
        PairKind::Translation => {
            let m = (size / 8).max(1) as i64;
            DistortionSpec::translation(rng.gen_range(-m..=m) as Real, rng.gen_range(-m..=m) as Real)
        }
        PairKind::Affine => random_distortion(size, size, &DistortionRange::default().affine_only(), seed)?,
    };
    let t = Distortion::new(&spec, size, size)?;
    let mut fy = Tensor::zeros(size, size, channels);
    let mut truth = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let p = [x as Real, y as Real];
            let q = t.forward(p);
            bilinear_sample_into(&fx, q[0], q[1], fy.pixel_mut(y, x));
            truth.push(t.inverse(p));
        }
    }
    Ok(FeaturePair {
        source: average_pyramid(fx, levels)?,
        exemplar: average_pyramid(fy, levels)?,
        truth,
    })
}

fn distance(a: Point, b: Point) -> Real {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Fraction of positions whose top-1 matches lie within one pixel.
pub fn top1_agreement(a: &CorrField, b: &CorrField) -> Real {
    let n = a.positions();
    let hits = (0..n)
        .filter(|&p| distance(a.candidates(p).0[0], b.candidates(p).0[0]) <= 1.0)
        .count();
    hits as Real / n as Real
}

pub fn mean_endpoint_error(field: &CorrField, truth: &[Point]) -> Real {
    let n = field.positions();
    let sum: Real = (0..n).map(|p| distance(field.candidates(p).0[0], truth[p])).sum();
    sum / n as Real
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub size: usize,
    pub channels: usize,
    pub kind: PairKind,
    pub match_config: MatchConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub channels: usize,
    pub k: usize,
    pub levels: usize,
    pub iters: usize,
    pub exhaustive_ms: f64,
    pub hierarchical_ms: f64,
    pub exhaustive_bytes: usize,
    pub hierarchical_bytes: usize,
    pub top1_agreement: Real,
    pub mean_epe_hierarchical: Real,
    pub mean_epe_exhaustive: Real,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.exhaustive_ms / self.hierarchical_ms.max(1e-9)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3},{:.3},{:.3},{},{},{:.6},{:.6},{:.6}",
            self.size,
            self.channels,
            self.k,
            self.levels,
            self.iters,
            self.exhaustive_ms,
            self.hierarchical_ms,
            self.speedup(),
            self.exhaustive_bytes,
            self.hierarchical_bytes,
            self.top1_agreement,
            self.mean_epe_hierarchical,
            self.mean_epe_exhaustive
        )
    }
}

/// Matches one synthetic pair both ways. With `refiners` unset the refiners
/// start from their seeded initialization, whose displacement head is zero.
pub fn run_bench(config: &BenchConfig, refiners: Option<&[RefinerParams]>) -> Result<BenchRow> {
    let mc = &config.match_config;
    mc.validate()?;
    let pair = synthetic_pair(config.size, config.channels, mc.levels, config.kind, config.seed)?;
    let owned;
    let refiners = match refiners {
        Some(r) => r,
        None => {
            owned = mc.default_refiners(&pair.source, config.seed)?;
            &owned
        }
    };

    let start = Instant::now();
    let exhaustive = exhaustive_match_capped(pair.source.finest(), pair.exemplar.finest(), mc.k, mc.exhaustive_cap)?;
    let exhaustive_ms = start.elapsed().as_secs_f64() * 1e3;

    let start = Instant::now();
    let fields = hierarchical_match(&pair.source, &pair.exemplar, refiners, mc)?;
    let hierarchical_ms = start.elapsed().as_secs_f64() * 1e3;
    let finest = fields.last().expect("at least one level");

    let n = config.size * config.size;
    Ok(BenchRow {
        size: config.size,
        channels: config.channels,
        k: mc.k,
        levels: mc.levels,
        iters: mc.iters,
        exhaustive_ms,
        hierarchical_ms,
        exhaustive_bytes: exhaustive_memory_estimate(n),
        hierarchical_bytes: hierarchical_memory_estimate(n, mc, config.channels),
        top1_agreement: top1_agreement(finest, &exhaustive),
        mean_epe_hierarchical: mean_endpoint_error(finest, &pair.truth),
        mean_epe_exhaustive: mean_endpoint_error(&exhaustive, &pair.truth),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_matches_row_arity() {
        let row = BenchRow {
            size: 1,
            channels: 1,
            k: 1,
            levels: 1,
            iters: 1,
            exhaustive_ms: 1.0,
            hierarchical_ms: 1.0,
            exhaustive_bytes: 1,
            hierarchical_bytes: 1,
            top1_agreement: 1.0,
            mean_epe_hierarchical: 0.0,
            mean_epe_exhaustive: 0.0,
        };
        assert_eq!(row.csv_row().split(',').count(), BENCH_CSV_HEADER.split(',').count());
    }

    #[test]
    fn synthetic_pair_is_seeded() {
        for kind in [PairKind::Translation, PairKind::Affine] {
            let a = synthetic_pair(16, 4, 2, kind, 3).unwrap();
            let b = synthetic_pair(16, 4, 2, kind, 3).unwrap();
            assert_eq!(a.exemplar, b.exemplar);
            assert_eq!(a.truth, b.truth);
            assert_ne!(synthetic_pair(16, 4, 2, kind, 4).unwrap().truth, a.truth);
        }
    }
}
