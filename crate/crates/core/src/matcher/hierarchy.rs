//! Coarse-to-fine matching: exact matching at the coarsest level, then per
//! level an upsampled seed refined by alternating propagation and GRU steps.

use super::exhaustive::{exhaustive_match_capped, DEFAULT_EXHAUSTIVE_CAP};
use super::field::{sort_position, CorrField, OffsetField, Point, Scorer};
use super::propagate::{check_dims, propagate_backward, propagate_traced, Provenance};
use super::refiner::{score_backward, step_backward, step_forward, RefineMode, RefinerGrads, RefinerParams, StepTape};
use crate::error::{Error, Result};
use crate::pyramid::Pyramid;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchConfig {
    /// Candidates per position.
    pub k: usize,
    pub levels: usize,
    /// Propagate + refine iterations per level.
    pub iters: usize,
    /// Softmax temperature used when warping.
    pub temperature: Real,
    pub mode: RefineMode,
    /// GRU hidden width.
    pub hidden: usize,
    /// Width of each of the four input embeddings.
    pub embed: usize,
    /// Ceiling on the coarsest-level similarity matrix, in bytes.
    pub exhaustive_cap: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            k: 16,
            levels: 4,
            iters: 3,
            temperature: 0.01,
            mode: RefineMode::Pure,
            hidden: 64,
            embed: 16,
            exhaustive_cap: DEFAULT_EXHAUSTIVE_CAP,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > u16::MAX as usize {
            return Err(Error::invalid("config", format!("K = {} must lie in 1..=65535", self.k)));
        }
        if self.levels == 0 {
            return Err(Error::invalid("config", "levels must be at least 1"));
        }
        if self.iters == 0 {
            return Err(Error::invalid("config", "iterations per level must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(
                "config",
                format!("temperature must be positive, got {}", self.temperature),
            ));
        }
        if self.hidden == 0 || self.embed == 0 {
            return Err(Error::invalid("config", "hidden and embedding widths must be positive"));
        }
        Ok(())
    }

    /// Untrained refiners (zero displacement head) for every refined level
    /// of a pyramid pair.
    pub fn default_refiners(&self, pyr_x: &Pyramid, seed: u64) -> Result<Vec<RefinerParams>> {
        (1..pyr_x.len())
            .map(|l| {
                RefinerParams::new(
                    pyr_x.level(l).channels(),
                    self.k,
                    self.hidden,
                    self.embed,
                    seed.wrapping_add(l as u64),
                )
            })
            .collect()
    }
}

/// Seeds a field at twice the resolution: every coarse position hands its
/// candidates to its 2x2 children, as `2 * H(p, k) + (child offset)`. Scores
/// are copied and must be recomputed against the fine features before use.
pub fn upsample_field(coarse: &CorrField) -> CorrField {
    let (h, w, k) = (coarse.height(), coarse.width(), coarse.k());
    let (fh, fw) = (2 * h, 2 * w);
    let mut coords = Vec::with_capacity(fh * fw * k);
    let mut scores = Vec::with_capacity(fh * fw * k);
    for y in 0..fh {
        for x in 0..fw {
            let (c, s) = coarse.candidates((y / 2) * w + x / 2);
            let (ox, oy) = ((x % 2) as Real, (y % 2) as Real);
            coords.extend(c.iter().map(|q| [2.0 * q[0] + ox, 2.0 * q[1] + oy]));
            scores.extend_from_slice(s);
        }
    }
    CorrField::from_parts(
        (fh, fw, k),
        (2 * coarse.target_height(), 2 * coarse.target_width()),
        coords,
        scores,
    )
}

/// Offsets `H(p, k) - p` and freshly computed scores as an `H x W x K` grid.
pub fn offsets_scores(field: &CorrField, fx: &Tensor, fy: &Tensor) -> Result<(OffsetField, Tensor)> {
    check_dims(field, fx, fy)?;
    let scorer = Scorer::new("offsets_scores", fx, fy)?;
    let mut buf = vec![0.0; fy.channels()];
    let scores = field
        .coords()
        .iter()
        .enumerate()
        .map(|(i, c)| scorer.score(i / field.k(), c, &mut buf))
        .collect();
    Ok((
        field.offsets(),
        Tensor::from_raw(field.height(), field.width(), field.k(), scores),
    ))
}

fn rescore(field: &CorrField, scorer: &Scorer) -> (CorrField, Vec<u16>) {
    let k = field.k();
    let mut out = field.clone();
    let mut order = Vec::with_capacity(field.coords().len());
    let mut buf = vec![0.0; scorer.fy.channels()];
    let (coords, scores) = out.parts_mut();
    for p in 0..field.positions() {
        let r = p * k..(p + 1) * k;
        for i in r.clone() {
            scores[i] = scorer.score(p, &coords[i], &mut buf);
        }
        order.extend(sort_position(&mut coords[r.clone()], &mut scores[r]));
    }
    (out, order)
}

pub(crate) struct LevelTrace {
    init_order: Vec<u16>,
    provenance: Vec<Vec<Provenance>>,
    steps: Vec<StepTape>,
}

/// Intermediate state of [`hierarchical_match_traced`] for the backward pass.
pub struct MatchTrace {
    levels: Vec<Option<LevelTrace>>,
    k: usize,
}

fn refine_level_impl(
    init: &CorrField,
    fx: &Tensor,
    fy: &Tensor,
    params: &RefinerParams,
    config: &MatchConfig,
    record: bool,
) -> Result<(CorrField, Option<LevelTrace>)> {
    check_dims(init, fx, fy)?;
    let scorer = Scorer::new("refine_level", fx, fy)?;
    let (mut field, init_order) = rescore(init, &scorer);
    let mut hidden = Tensor::zeros(init.height(), init.width(), params.hidden());
    let mut trace = LevelTrace {
        init_order,
        provenance: Vec::new(),
        steps: Vec::new(),
    };
    for _ in 0..config.iters {
        let (propagated, prov) = propagate_traced(&field, &scorer);
        if propagated.k() != params.k() || params.channels() != fx.channels() {
            return Err(Error::shape(
                "refine_level",
                format!("refiner for {} channels and K = {}", params.channels(), params.k()),
                format!("{} channels and K = {}", fx.channels(), propagated.k()),
            ));
        }
        let (next, tape) = step_forward(propagated, hidden, &scorer, params, config.mode)?;
        field = next;
        if record {
            hidden = tape.hidden().clone();
            trace.provenance.push(prov);
            trace.steps.push(tape);
        } else {
            hidden = tape.into_hidden();
        }
    }
    Ok((field, record.then_some(trace)))
}

/// Rescores `init` against the level's features, then runs `T` rounds of
/// propagation followed by a GRU update, carrying the hidden state.
pub fn refine_level(
    init: &CorrField,
    fx: &Tensor,
    fy: &Tensor,
    params: &RefinerParams,
    config: &MatchConfig,
) -> Result<CorrField> {
    config.validate()?;
    Ok(refine_level_impl(init, fx, fy, params, config, false)?.0)
}

fn check_pyramids(pyr_x: &Pyramid, pyr_y: &Pyramid, refiners: &[RefinerParams]) -> Result<()> {
    if pyr_x.len() != pyr_y.len() {
        return Err(Error::shape(
            "hierarchical_match",
            format!("{} levels", pyr_x.len()),
            format!("{} levels", pyr_y.len()),
        ));
    }
    for (a, b) in pyr_x.levels().iter().zip(pyr_y.levels()) {
        if a.channels() != b.channels() {
            return Err(Error::shape("hierarchical_match", a.shape(), b.shape()));
        }
    }
    if refiners.len() + 1 < pyr_x.len() {
        return Err(Error::invalid(
            "hierarchical_match",
            format!("{} levels need {} refiners, got {}", pyr_x.len(), pyr_x.len() - 1, refiners.len()),
        ));
    }
    Ok(())
}

/// Correspondence fields for every level, coarse to fine.
pub fn hierarchical_match(
    pyr_x: &Pyramid,
    pyr_y: &Pyramid,
    refiners: &[RefinerParams],
    config: &MatchConfig,
) -> Result<Vec<CorrField>> {
    Ok(run(pyr_x, pyr_y, refiners, config, false)?.0)
}

/// [`hierarchical_match`] that also keeps what [`hierarchical_backward`] needs.
pub fn hierarchical_match_traced(
    pyr_x: &Pyramid,
    pyr_y: &Pyramid,
    refiners: &[RefinerParams],
    config: &MatchConfig,
) -> Result<(Vec<CorrField>, MatchTrace)> {
    run(pyr_x, pyr_y, refiners, config, true)
}

fn run(
    pyr_x: &Pyramid,
    pyr_y: &Pyramid,
    refiners: &[RefinerParams],
    config: &MatchConfig,
    record: bool,
) -> Result<(Vec<CorrField>, MatchTrace)> {
    config.validate()?;
    check_pyramids(pyr_x, pyr_y, refiners)?;
    if pyr_x.len() != config.levels {
        return Err(Error::invalid(
            "hierarchical_match",
            format!("pyramids have {} levels but the config asks for {}", pyr_x.len(), config.levels),
        ));
    }
    let mut fields = vec![exhaustive_match_capped(
        pyr_x.level(0),
        pyr_y.level(0),
        config.k,
        config.exhaustive_cap,
    )?];
    let mut levels = vec![None];
    for l in 1..pyr_x.len() {
        let init = upsample_field(fields.last().unwrap());
        let (field, trace) =
            refine_level_impl(&init, pyr_x.level(l), pyr_y.level(l), &refiners[l - 1], config, record)?;
        fields.push(field);
        levels.push(trace);
    }
    Ok((fields, MatchTrace { levels, k: config.k }))
}

/// Gradients produced by [`hierarchical_backward`].
pub struct MatchGrads {
    /// One entry per refined level (levels `2..=L`).
    pub refiners: Vec<RefinerGrads>,
    pub fx: Vec<Tensor>,
    pub fy: Vec<Tensor>,
}

/// Backpropagates coordinate and score gradients of every output field to
/// the refiner parameters and both feature pyramids. Coordinates of the
/// coarsest level come from a discrete search and carry no gradient.
pub fn hierarchical_backward(
    fields: &[CorrField],
    trace: &MatchTrace,
    pyr_x: &Pyramid,
    pyr_y: &Pyramid,
    refiners: &[RefinerParams],
    d_coords: &[Vec<Point>],
    d_scores: &[Vec<Real>],
) -> Result<MatchGrads> {
    let n = fields.len();
    if trace.levels.len() != n || d_coords.len() != n || d_scores.len() != n || pyr_x.len() != n {
        return Err(Error::invalid("hierarchical_backward", "level counts disagree"));
    }
    let k = trace.k;
    let mut grads = MatchGrads {
        refiners: refiners[..n - 1].iter().map(RefinerGrads::zeros_like).collect(),
        fx: pyr_x.levels().iter().map(|t| Tensor::zeros(t.height(), t.width(), t.channels())).collect(),
        fy: pyr_y.levels().iter().map(|t| Tensor::zeros(t.height(), t.width(), t.channels())).collect(),
    };
    let mut carried: Option<Vec<Point>> = None;
    for l in (0..n).rev() {
        let field = &fields[l];
        let (fx, fy) = (pyr_x.level(l), pyr_y.level(l));
        if d_coords[l].len() != field.coords().len() || d_scores[l].len() != field.scores().len() {
            return Err(Error::shape(
                "hierarchical_backward",
                format!("{} candidate gradients", field.coords().len()),
                format!("{} and {}", d_coords[l].len(), d_scores[l].len()),
            ));
        }
        let mut d_c = d_coords[l].clone();
        if let Some(c) = carried.take() {
            for (a, b) in d_c.iter_mut().zip(c) {
                a[0] += b[0];
                a[1] += b[1];
            }
        }
        score_backward(field, fx, fy, &d_scores[l], &mut d_c, &mut grads.fx[l], &mut grads.fy[l]);
        let Some(level) = &trace.levels[l] else {
            break;
        };
        let mut d_h: Option<Tensor> = None;
        for (tape, prov) in level.steps.iter().zip(&level.provenance).rev() {
            let (d_prop, d_hprev) = step_backward(
                tape,
                &refiners[l - 1],
                fx,
                fy,
                &d_c,
                d_h.as_ref(),
                &mut grads.refiners[l - 1],
                &mut grads.fx[l],
                &mut grads.fy[l],
            )?;
            d_h = Some(d_hprev);
            d_c = propagate_backward(prov, k, &d_prop);
        }
        // Undo the initial re-sort, then the 2x coordinate scaling.
        let mut d_up = vec![[0.0; 2]; d_c.len()];
        for p in 0..field.positions() {
            for j in 0..k {
                d_up[p * k + level.init_order[p * k + j] as usize] = d_c[p * k + j];
            }
        }
        let coarse = &fields[l - 1];
        let mut d_coarse = vec![[0.0; 2]; coarse.coords().len()];
        let w = field.width();
        for (i, g) in d_up.iter().enumerate() {
            let p = i / k;
            let parent = (p / w / 2) * coarse.width() + (p % w) / 2;
            let d = &mut d_coarse[parent * k + i % k];
            d[0] += 2.0 * g[0];
            d[1] += 2.0 * g[1];
        }
        carried = Some(d_coarse);
    }
    Ok(grads)
}

/// Bytes held by the similarity matrix of exhaustive matching at the given
/// number of positions.
pub fn exhaustive_memory_estimate(positions: usize) -> usize {
    super::exhaustive::similarity_matrix_bytes(positions, positions)
}

/// Bytes held by the per-level working set of hierarchical matching at the
/// finest level: fields, provenance, hidden states and GRU activations.
pub fn hierarchical_memory_estimate(positions: usize, config: &MatchConfig, channels: usize) -> usize {
    let r = std::mem::size_of::<Real>();
    let field = positions * config.k * (2 * r + r);
    let prov = positions * config.k * std::mem::size_of::<Provenance>();
    let gru = positions * (6 * config.hidden + 8 * config.embed + 3 * config.k + channels) * r;
    2 * field + prov + gru
}
