//! Desk-scale training of the refiners (and optionally the encoders) on
//! pseudo-exemplar pairs, minimising `lambda_corr * L_corr + lambda_align * L_align`.

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::matcher::{
    hierarchical_backward, hierarchical_match, hierarchical_match_traced, CorrField, MatchConfig,
    RefinerGrads, RefinerParams,
};
use crate::ops::{downsample_to, LayerGrad};
use crate::pyramid::{
    align_loss, align_loss_backward, encoder_backward, encoder_forward, extract_pyramid_encoder,
    extract_pyramid_handcrafted, DomainEncoders, EncoderTape, ImageRgb, Pyramid,
};
use crate::tensor::{Real, Tensor};

use super::distort::{make_pseudo_exemplar, random_distortion, DistortionRange};
use super::soft::{corr_loss, corr_loss_backward, soft_warp, soft_warp_backward};

/// How feature pyramids are produced.
#[derive(Clone, Debug, PartialEq)]
pub enum Extractor {
    Encoder(DomainEncoders),
    Handcrafted { radius: usize },
}

impl Extractor {
    /// Pyramids for a source image and an exemplar image.
    pub fn pyramids(&self, source: &ImageRgb, exemplar: &ImageRgb, levels: usize) -> Result<(Pyramid, Pyramid)> {
        match self {
            Extractor::Encoder(enc) => {
                check_levels(enc, levels)?;
                Ok((
                    extract_pyramid_encoder(source, &enc.source)?,
                    extract_pyramid_encoder(exemplar, &enc.exemplar)?,
                ))
            }
            Extractor::Handcrafted { radius } => Ok((
                extract_pyramid_handcrafted(source, levels, *radius)?,
                extract_pyramid_handcrafted(exemplar, levels, *radius)?,
            )),
        }
    }
}

fn check_levels(enc: &DomainEncoders, levels: usize) -> Result<()> {
    if enc.source.levels() != levels || enc.exemplar.levels() != levels {
        return Err(Error::invalid(
            "extractor",
            format!("encoders have {} levels, config asks for {levels}", enc.source.levels()),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub match_config: MatchConfig,
    pub steps: usize,
    pub adam: AdamConfig,
    pub lambda_corr: Real,
    pub lambda_align: Real,
    /// Keep the last displacement layer of every refiner fixed.
    pub freeze_head: bool,
    /// Update the encoders together with the refiners.
    pub joint_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            match_config: MatchConfig::default(),
            steps: 200,
            adam: AdamConfig::default(),
            lambda_corr: 1.0,
            lambda_align: 1.0,
            freeze_head: false,
            joint_encoder: true,
        }
    }
}

/// Losses measured at one step, before that step's update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub corr: Real,
    pub align: Real,
    pub total: Real,
}

pub const LOSS_CSV_HEADER: &str = "step,loss_corr,loss_align,loss_total";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{:e},{:e},{:e}", self.step, self.corr, self.align, self.total)
    }
}

pub struct TrainOutput {
    pub refiners: Vec<RefinerParams>,
    pub extractor: Extractor,
    pub losses: Vec<LossRecord>,
}

/// Cycles through `images`, distorting each with a fresh seeded distortion.
pub struct PseudoPairs {
    images: Vec<ImageRgb>,
    range: DistortionRange,
    seed: u64,
}

impl PseudoPairs {
    pub fn new(images: Vec<ImageRgb>, range: DistortionRange, seed: u64) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("pseudo_pairs", "need at least one image"));
        }
        Ok(PseudoPairs { images, range, seed })
    }

    /// `(source, pseudo exemplar)` for a step.
    pub fn pair(&self, step: usize) -> Result<(ImageRgb, ImageRgb)> {
        let img = &self.images[step % self.images.len()];
        let spec = random_distortion(img.height(), img.width(), &self.range, self.seed.wrapping_add(step as u64))?;
        let (exemplar, _) = make_pseudo_exemplar(img, &spec)?;
        Ok((img.clone(), exemplar))
    }
}

/// Level-sized copies of the exemplar image, coarse to fine.
fn exemplar_levels(exemplar: &ImageRgb, fields: &[CorrField]) -> Result<Vec<Tensor>> {
    fields
        .iter()
        .map(|f| downsample_to(exemplar.tensor(), f.target_height(), f.target_width()))
        .collect()
}

/// Warps the exemplar image through every field at its level's resolution.
pub fn warp_levels(exemplar: &ImageRgb, fields: &[CorrField], temperature: Real) -> Result<Vec<Tensor>> {
    exemplar_levels(exemplar, fields)?
        .iter()
        .zip(fields)
        .map(|(e, f)| Ok(soft_warp(e, f, temperature)?.image))
        .collect()
}

/// `L_corr` of the hierarchical fields for one pair, without gradients.
pub fn evaluate_corr(
    source: &ImageRgb,
    exemplar: &ImageRgb,
    extractor: &Extractor,
    refiners: &[RefinerParams],
    config: &MatchConfig,
) -> Result<Real> {
    let (px, py) = extractor.pyramids(source, exemplar, config.levels)?;
    let fields = hierarchical_match(&px, &py, refiners, config)?;
    corr_loss(&warp_levels(exemplar, &fields, config.temperature)?, source)
}

/// The training objective at one pair and its gradients.
pub struct Objective {
    /// `(L_corr, L_align)`, unweighted.
    pub losses: (Real, Real),
    /// Gradient of the weighted objective for every refiner.
    pub grads: Vec<RefinerGrads>,
    /// Source and exemplar encoder gradients, when training jointly.
    pub encoder_grads: Option<(Vec<LayerGrad>, Vec<LayerGrad>)>,
}

struct Tapes {
    source: EncoderTape,
    exemplar: EncoderTape,
    /// The source image through the exemplar encoder, for the alignment term.
    source_cross: (Pyramid, EncoderTape),
}

/// Losses and gradients of the objective for one pair.
pub fn objective(
    source: &ImageRgb,
    exemplar: &ImageRgb,
    extractor: &Extractor,
    refiners: &[RefinerParams],
    config: &TrainConfig,
) -> Result<Objective> {
    let mc = &config.match_config;
    let joint = config.joint_encoder && matches!(extractor, Extractor::Encoder(_));
    let (px, py, tapes) = match extractor {
        Extractor::Encoder(enc) if joint => {
            check_levels(enc, mc.levels)?;
            let (px, tx) = encoder_forward(source, &enc.source)?;
            let (py, ty) = encoder_forward(exemplar, &enc.exemplar)?;
            let cross = encoder_forward(source, &enc.exemplar)?;
            (
                px,
                py,
                Some(Tapes {
                    source: tx,
                    exemplar: ty,
                    source_cross: cross,
                }),
            )
        }
        _ => {
            let (px, py) = extractor.pyramids(source, exemplar, mc.levels)?;
            (px, py, None)
        }
    };
    let align = match (&tapes, extractor) {
        (Some(t), _) => align_loss(&px, &t.source_cross.0)?,
        (None, Extractor::Encoder(enc)) => align_loss(&px, &extract_pyramid_encoder(source, &enc.exemplar)?)?,
        (None, Extractor::Handcrafted { .. }) => 0.0,
    };

    let (fields, trace) = hierarchical_match_traced(&px, &py, refiners, mc)?;
    let ex_levels = exemplar_levels(exemplar, &fields)?;
    let results = ex_levels
        .iter()
        .zip(&fields)
        .map(|(e, f)| soft_warp(e, f, mc.temperature))
        .collect::<Result<Vec<_>>>()?;
    let warps: Vec<Tensor> = results.iter().map(|r| r.image.clone()).collect();
    let corr = corr_loss(&warps, source)?;

    let mut d_coords = Vec::with_capacity(fields.len());
    let mut d_scores = Vec::with_capacity(fields.len());
    for (((g, e), f), r) in corr_loss_backward(&warps, source)?
        .into_iter()
        .zip(&ex_levels)
        .zip(&fields)
        .zip(&results)
    {
        let g = g.map(|v| v * config.lambda_corr);
        let wg = soft_warp_backward(e, f, r, &g)?;
        d_coords.push(wg.coords);
        d_scores.push(wg.scores);
    }
    let mg = hierarchical_backward(&fields, &trace, &px, &py, refiners, &d_coords, &d_scores)?;
    let mut grads = mg.refiners;
    grads.extend(refiners[grads.len()..].iter().map(RefinerGrads::zeros_like));

    let encoder_grads = match (tapes, extractor) {
        (Some(t), Extractor::Encoder(enc)) => {
            let ga = align_loss_backward(&px, &t.source_cross.0)?;
            let mut dx = mg.fx;
            let mut d_cross = Vec::with_capacity(ga.len());
            for (d, a) in dx.iter_mut().zip(&ga) {
                let a = a.map(|v| v * config.lambda_align);
                d.add_assign(&a);
                d_cross.push(a.map(|v| -v));
            }
            let g_src = encoder_backward(&t.source, &enc.source, &dx)?;
            let mut g_ex = encoder_backward(&t.exemplar, &enc.exemplar, &mg.fy)?;
            let g_cross = encoder_backward(&t.source_cross.1, &enc.exemplar, &d_cross)?;
            for (a, b) in g_ex.iter_mut().zip(&g_cross) {
                a.accumulate(&b.kernel, &b.bias);
            }
            Some((g_src, g_ex))
        }
        _ => None,
    };
    Ok(Objective {
        losses: (corr, align),
        grads,
        encoder_grads,
    })
}

fn flatten_params(refiners: &[RefinerParams], extractor: &Extractor, joint: bool) -> Vec<Real> {
    let mut out: Vec<Real> = refiners.iter().flat_map(|r| r.flatten()).collect();
    if let (true, Extractor::Encoder(enc)) = (joint, extractor) {
        for l in enc.to_layers() {
            l.flatten_into(&mut out);
        }
    }
    out
}

fn load_params(flat: &[Real], refiners: &mut [RefinerParams], extractor: &mut Extractor, joint: bool) {
    let mut rest = flat;
    for r in refiners.iter_mut() {
        let n = r.num_params();
        r.load_flat(&rest[..n]);
        rest = &rest[n..];
    }
    if let (true, Extractor::Encoder(enc)) = (joint, extractor) {
        for l in enc.source.layers_mut().iter_mut().chain(enc.exemplar.layers_mut()) {
            rest = l.load_flat(rest);
        }
    }
}

/// Runs `config.steps` Adam updates, drawing the pair for each step from
/// `pairs`. Losses are recorded before each update; a non-finite loss stops
/// training with [`Error::Divergence`].
pub fn train_refiner(
    mut pairs: impl FnMut(usize) -> Result<(ImageRgb, ImageRgb)>,
    refiners: Vec<RefinerParams>,
    extractor: Extractor,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.match_config.validate()?;
    if config.match_config.levels > 1 && refiners.len() + 1 < config.match_config.levels {
        return Err(Error::invalid(
            "train_refiner",
            format!(
                "{} levels need {} refiners, got {}",
                config.match_config.levels,
                config.match_config.levels - 1,
                refiners.len()
            ),
        ));
    }
    let joint = config.joint_encoder && matches!(extractor, Extractor::Encoder(_));
    let mut refiners = refiners;
    let mut extractor = extractor;
    let mut flat = flatten_params(&refiners, &extractor, joint);
    let mut state = AdamState::new(flat.len());
    let mut losses = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let (source, exemplar) = pairs(step)?;
        let fw = objective(&source, &exemplar, &extractor, &refiners, config)?;
        let (corr, align) = fw.losses;
        let total = config.lambda_corr * corr + config.lambda_align * align;
        if !total.is_finite() {
            return Err(Error::Divergence { step });
        }
        losses.push(LossRecord {
            step,
            corr,
            align,
            total,
        });

        let mut g = Vec::with_capacity(flat.len());
        for (r, rg) in refiners.iter().zip(&fw.grads) {
            let start = g.len();
            g.extend(rg.flatten());
            if config.freeze_head {
                let head = r.head_out.num_params();
                let end = start + r.num_params();
                g[end - head..end].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        if let Some((src, ex)) = &fw.encoder_grads {
            for lg in src.iter().chain(ex) {
                lg.flatten_into(&mut g);
            }
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step });
        }
        adam_step(&mut flat, &g, &mut state, &config.adam)?;
        load_params(&flat, &mut refiners, &mut extractor, joint);
    }
    Ok(TrainOutput {
        refiners,
        extractor,
        losses,
    })
}
