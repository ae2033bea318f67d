//! Convolutional GRU refinement of a propagated field.
//!
//! The GRU input `x_t` stacks four 1x1 embeddings: the source features, the
//! target features gathered at each position's best match, the candidate
//! offsets and the candidate scores. The hidden state drives a two-layer head
//! that predicts one displacement per candidate.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::field::{sort_position, CorrField, Point, Scorer};
use super::propagate::check_dims;
use crate::error::{Error, Result};
use crate::ops::{
    bilinear_backward_location, bilinear_backward_map, bilinear_sample_into, clamp_location, conv2d,
    conv2d_backward, leaky_relu, leaky_relu_backward, sigmoid, cosine_backward_into,
    ConvParams, LayerGrad,
};
use crate::pyramid::weights;
use crate::tensor::{Real, Tensor};

/// How a predicted displacement is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RefineMode {
    /// Always apply the update.
    #[default]
    Pure,
    /// Keep a moved candidate only if its score improves.
    Greedy,
}

/// Number of convolution layers in one refiner.
pub const REFINER_LAYERS: usize = 9;

#[derive(Clone, Debug, PartialEq)]
pub struct RefinerParams {
    pub embed_fx: ConvParams,
    pub embed_fy: ConvParams,
    pub embed_offset: ConvParams,
    pub embed_score: ConvParams,
    pub gate_z: ConvParams,
    pub gate_r: ConvParams,
    pub candidate: ConvParams,
    pub head_hidden: ConvParams,
    pub head_out: ConvParams,
}

impl RefinerParams {
    /// Random embeddings, gates and hidden head layer; the final head layer
    /// starts at zero so an untrained refiner leaves coordinates unchanged.
    pub fn new(channels: usize, k: usize, hidden: usize, embed: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(channels, k, hidden, embed, |k, ci, co| {
            ConvParams::random(k, ci, co, 1, k / 2, 1.0, &mut rng)
        })
    }

    pub fn zeros(channels: usize, k: usize, hidden: usize, embed: usize) -> Result<Self> {
        Self::build(channels, k, hidden, embed, |k, ci, co| ConvParams::same(k, ci, co))
    }

    fn build(
        channels: usize,
        k: usize,
        hidden: usize,
        embed: usize,
        mut make: impl FnMut(usize, usize, usize) -> Result<ConvParams>,
    ) -> Result<Self> {
        if channels == 0 || k == 0 || hidden == 0 || embed == 0 {
            return Err(Error::invalid("refiner", "all widths must be positive"));
        }
        let gate_in = hidden + 4 * embed;
        Ok(RefinerParams {
            embed_fx: make(1, channels, embed)?,
            embed_fy: make(1, channels, embed)?,
            embed_offset: make(1, 2 * k, embed)?,
            embed_score: make(1, k, embed)?,
            gate_z: make(3, gate_in, hidden)?,
            gate_r: make(3, gate_in, hidden)?,
            candidate: make(3, gate_in, hidden)?,
            head_hidden: make(3, hidden, hidden)?,
            head_out: ConvParams::same(3, hidden, 2 * k)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.embed_fx.in_channels()
    }

    pub fn k(&self) -> usize {
        self.embed_score.in_channels()
    }

    pub fn hidden(&self) -> usize {
        self.gate_z.out_channels()
    }

    pub fn embed(&self) -> usize {
        self.embed_fx.out_channels()
    }

    pub fn layers(&self) -> [&ConvParams; REFINER_LAYERS] {
        [
            &self.embed_fx,
            &self.embed_fy,
            &self.embed_offset,
            &self.embed_score,
            &self.gate_z,
            &self.gate_r,
            &self.candidate,
            &self.head_hidden,
            &self.head_out,
        ]
    }

    pub fn layers_mut(&mut self) -> [&mut ConvParams; REFINER_LAYERS] {
        [
            &mut self.embed_fx,
            &mut self.embed_fy,
            &mut self.embed_offset,
            &mut self.embed_score,
            &mut self.gate_z,
            &mut self.gate_r,
            &mut self.candidate,
            &mut self.head_hidden,
            &mut self.head_out,
        ]
    }

    /// Rebuilds a refiner from its nine layers, checking the channel chain.
    pub fn from_layers(layers: Vec<ConvParams>) -> Result<Self> {
        if layers.len() != REFINER_LAYERS {
            return Err(Error::invalid(
                "refiner",
                format!("expected {REFINER_LAYERS} layers, found {}", layers.len()),
            ));
        }
        let channels = layers[0].in_channels();
        let embed = layers[0].out_channels();
        let k = layers[3].in_channels();
        let hidden = layers[4].out_channels();
        let template = Self::zeros(channels, k, hidden, embed)?;
        let mut out = template.clone();
        for (i, (dst, src)) in out.layers_mut().into_iter().zip(layers).enumerate() {
            let want = template.layers()[i];
            if src.kernel_size() != want.kernel_size()
                || src.in_channels() != want.in_channels()
                || src.out_channels() != want.out_channels()
            {
                return Err(Error::shape(
                    "refiner manifest",
                    format!(
                        "layer {i}: {0}x{0}x{1}x{2}",
                        want.kernel_size(),
                        want.in_channels(),
                        want.out_channels()
                    ),
                    format!(
                        "{0}x{0}x{1}x{2}",
                        src.kernel_size(),
                        src.in_channels(),
                        src.out_channels()
                    ),
                ));
            }
            *dst = src.with_geometry(1, want.padding())?;
        }
        Ok(out)
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.num_params()).sum()
    }

    pub fn flatten(&self) -> Vec<Real> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            l.flatten_into(&mut out);
        }
        out
    }

    pub fn load_flat(&mut self, mut src: &[Real]) {
        for l in self.layers_mut() {
            src = l.load_flat(src);
        }
    }

    pub fn head_is_zero(&self) -> bool {
        self.head_out.is_zero()
    }
}

/// Refiners for levels `2..=L`, stored back to back in one weight file.
pub fn save_refiners(path: impl AsRef<Path>, refiners: &[RefinerParams]) -> Result<()> {
    weights::save_layers(path, &refiners_to_layers(refiners))
}

pub fn refiners_to_layers(refiners: &[RefinerParams]) -> Vec<ConvParams> {
    refiners
        .iter()
        .flat_map(|r| r.layers().into_iter().cloned())
        .collect()
}

pub fn refiners_from_layers(layers: Vec<ConvParams>) -> Result<Vec<RefinerParams>> {
    if layers.len() % REFINER_LAYERS != 0 {
        return Err(Error::invalid(
            "refiner",
            format!("{} layers is not a multiple of {REFINER_LAYERS}", layers.len()),
        ));
    }
    let mut out = Vec::new();
    let mut it = layers.into_iter();
    loop {
        let chunk: Vec<ConvParams> = it.by_ref().take(REFINER_LAYERS).collect();
        if chunk.is_empty() {
            break;
        }
        out.push(RefinerParams::from_layers(chunk)?);
    }
    Ok(out)
}

pub fn load_refiners(path: impl AsRef<Path>) -> Result<Vec<RefinerParams>> {
    refiners_from_layers(weights::load_layers(path)?)
}

/// Gradients for every layer of a [`RefinerParams`], in `layers()` order.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinerGrads(pub Vec<LayerGrad>);

impl RefinerGrads {
    pub fn zeros_like(params: &RefinerParams) -> Self {
        RefinerGrads(params.layers().into_iter().map(LayerGrad::zeros_like).collect())
    }

    pub fn flatten(&self) -> Vec<Real> {
        let mut out = Vec::new();
        for g in &self.0 {
            g.flatten_into(&mut out);
        }
        out
    }

    fn add(&mut self, layer: usize, g: &crate::ops::ConvGrads) {
        self.0[layer].accumulate(&g.kernel, &g.bias);
    }
}

/// Activations of one refinement step, kept for the backward pass.
pub(crate) struct StepTape {
    pub propagated: CorrField,
    gathered: Tensor,
    offsets: Tensor,
    scores: Tensor,
    x: Tensor,
    hx: Tensor,
    rhx: Tensor,
    h_prev: Tensor,
    z: Tensor,
    r: Tensor,
    h_cand: Tensor,
    h: Tensor,
    head_pre: Tensor,
    /// Per candidate slot before sorting: whether the update was applied, and
    /// which axes were clamped.
    moved: Vec<bool>,
    clamped: Vec<[bool; 2]>,
    /// Per output slot, the pre-sort slot it came from.
    order: Vec<u16>,
}

impl StepTape {
    #[cfg(test)]
    pub fn gates(&self) -> (&Tensor, &Tensor, &Tensor) {
        (&self.z, &self.r, &self.h_cand)
    }
}

fn check_refiner(field: &CorrField, hidden: &Tensor, fx: &Tensor, params: &RefinerParams) -> Result<()> {
    if params.channels() != fx.channels() || params.k() != field.k() {
        return Err(Error::shape(
            "gru_refine_step",
            format!("features with {} channels and K = {}", params.channels(), params.k()),
            format!("{} channels and K = {}", fx.channels(), field.k()),
        ));
    }
    hidden.expect_shape(
        "gru_refine_step",
        crate::error::Shape(field.height(), field.width(), params.hidden()),
    )
}

/// One GRU update of a propagated field `H'_t`: returns `H_{t+1}` and `h_t`.
pub fn gru_refine_step(
    field: &CorrField,
    hidden: &Tensor,
    fx: &Tensor,
    fy: &Tensor,
    params: &RefinerParams,
    mode: RefineMode,
) -> Result<(CorrField, Tensor)> {
    check_dims(field, fx, fy)?;
    check_refiner(field, hidden, fx, params)?;
    let scorer = Scorer::new("gru_refine_step", fx, fy)?;
    let (out, tape) = step_forward(field.clone(), hidden.clone(), &scorer, params, mode)?;
    Ok((out, tape.h))
}

pub(crate) fn step_forward(
    propagated: CorrField,
    h_prev: Tensor,
    scorer: &Scorer,
    params: &RefinerParams,
    mode: RefineMode,
) -> Result<(CorrField, StepTape)> {
    let (h, w, k) = (propagated.height(), propagated.width(), propagated.k());
    let fy = scorer.fy;
    let c = fy.channels();
    let mut gathered = Tensor::zeros(h, w, c);
    for p in 0..h * w {
        let t = propagated.candidates(p).0[0];
        bilinear_sample_into(fy, t[0], t[1], gathered.site_mut(p));
    }
    let offsets = propagated.offsets().to_tensor();
    let scores = Tensor::from_raw(h, w, k, propagated.scores().to_vec());

    let x = Tensor::concat_channels(&[
        &conv2d(scorer.fx, &params.embed_fx)?,
        &conv2d(&gathered, &params.embed_fy)?,
        &conv2d(&offsets, &params.embed_offset)?,
        &conv2d(&scores, &params.embed_score)?,
    ])?;
    let hx = Tensor::concat_channels(&[&h_prev, &x])?;
    let z = conv2d(&hx, &params.gate_z)?.map(sigmoid);
    let r = conv2d(&hx, &params.gate_r)?.map(sigmoid);
    let mut rh = h_prev.clone();
    for (a, b) in rh.data_mut().iter_mut().zip(r.data()) {
        *a *= b;
    }
    let rhx = Tensor::concat_channels(&[&rh, &x])?;
    let h_cand = conv2d(&rhx, &params.candidate)?.map(Real::tanh);
    let mut h_new = h_prev.clone();
    for ((o, zz), hc) in h_new.data_mut().iter_mut().zip(z.data()).zip(h_cand.data()) {
        *o = (1.0 - zz) * *o + zz * hc;
    }
    let head_pre = conv2d(&h_new, &params.head_hidden)?;
    // A zero head yields an exactly zero update; skip the convolution.
    let delta = if params.head_out.is_zero() {
        Tensor::zeros(h, w, 2 * k)
    } else {
        conv2d(&leaky_relu(&head_pre), &params.head_out)?
    };
    if !delta.is_finite() {
        return Err(Error::NonFinite { op: "gru_refine_step" });
    }

    let (th, tw) = (propagated.target_height(), propagated.target_width());
    let mut coords = propagated.coords().to_vec();
    let mut new_scores = propagated.scores().to_vec();
    let mut moved = vec![false; h * w * k];
    let mut clamped = vec![[false; 2]; h * w * k];
    let mut buf = vec![0.0; c];
    for p in 0..h * w {
        let d = delta.site(p);
        for j in 0..k {
            let i = p * k + j;
            let (dx, dy) = (d[2 * j], d[2 * j + 1]);
            if dx == 0.0 && dy == 0.0 {
                // The coordinate still depends on the update in pure mode.
                moved[i] = mode == RefineMode::Pure;
                continue;
            }
            let old = coords[i];
            let (cand, cl) = clamp_location(th, tw, old[0] + dx, old[1] + dy);
            let s = scorer.score(p, &cand, &mut buf);
            if mode == RefineMode::Greedy && s <= new_scores[i] {
                continue;
            }
            coords[i] = cand;
            new_scores[i] = s;
            moved[i] = true;
            clamped[i] = cl;
        }
    }
    let mut order = Vec::with_capacity(h * w * k);
    for p in 0..h * w {
        let r = p * k..(p + 1) * k;
        order.extend(sort_position(&mut coords[r.clone()], &mut new_scores[r]));
    }
    let out = CorrField::from_parts((h, w, k), (th, tw), coords, new_scores);
    Ok((
        out,
        StepTape {
            propagated,
            gathered,
            offsets,
            scores,
            x,
            hx,
            rhx,
            h_prev,
            z,
            r,
            h_cand,
            h: h_new,
            head_pre,
            moved,
            clamped,
            order,
        },
    ))
}

impl StepTape {
    pub fn hidden(&self) -> &Tensor {
        &self.h
    }

    pub fn into_hidden(self) -> Tensor {
        self.h
    }
}

/// Accumulates into `d_fx`/`d_fy` and `d_coords` the gradient of scores
/// `S(p, k) = cos(fx(p), fy(H(p, k)))` given `d_scores`.
pub(crate) fn score_backward(
    field: &CorrField,
    fx: &Tensor,
    fy: &Tensor,
    d_scores: &[Real],
    d_coords: &mut [Point],
    d_fx: &mut Tensor,
    d_fy: &mut Tensor,
) {
    let c = fx.channels();
    let mut sample = vec![0.0; c];
    let mut d_sample = vec![0.0; c];
    for (i, (coord, &g)) in field.coords().iter().zip(d_scores).enumerate() {
        if g == 0.0 {
            continue;
        }
        let p = i / field.k();
        bilinear_sample_into(fy, coord[0], coord[1], &mut sample);
        d_sample.iter_mut().for_each(|v| *v = 0.0);
        cosine_backward_into(fx.site(p), &sample, g, d_fx.site_mut(p), &mut d_sample);
        bilinear_backward_map(d_fy, coord[0], coord[1], &d_sample);
        let dl = bilinear_backward_location(fy, coord[0], coord[1], &d_sample);
        d_coords[i][0] += dl[0];
        d_coords[i][1] += dl[1];
    }
}

fn mul(a: &Tensor, f: impl Fn(usize, Real) -> Real) -> Tensor {
    let mut out = a.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = f(i, *v);
    }
    out
}

/// Backward through one refinement step.
///
/// `d_out` holds coordinate gradients of the step's (sorted) output field and
/// `d_h` the gradient reaching `h_t` from later steps. Returns the gradients
/// for the propagated field's coordinates and for `h_{t-1}`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn step_backward(
    tape: &StepTape,
    params: &RefinerParams,
    fx: &Tensor,
    fy: &Tensor,
    d_out: &[Point],
    d_h: Option<&Tensor>,
    grads: &mut RefinerGrads,
    d_fx: &mut Tensor,
    d_fy: &mut Tensor,
) -> Result<(Vec<Point>, Tensor)> {
    let prop = &tape.propagated;
    let (h, w, k) = (prop.height(), prop.width(), prop.k());

    let mut d_prop = vec![[0.0; 2]; h * w * k];
    let mut d_delta = Tensor::zeros(h, w, 2 * k);
    for p in 0..h * w {
        for j in 0..k {
            let i = p * k + tape.order[p * k + j] as usize;
            let g = d_out[p * k + j];
            if !tape.moved[i] {
                d_prop[i][0] += g[0];
                d_prop[i][1] += g[1];
                continue;
            }
            let slot = i - p * k;
            for a in 0..2 {
                if !tape.clamped[i][a] {
                    d_prop[i][a] += g[a];
                    d_delta.site_mut(p)[2 * slot + a] += g[a];
                }
            }
        }
    }

    let act = leaky_relu(&tape.head_pre);
    let g_out = conv2d_backward(&act, &params.head_out, &d_delta)?;
    grads.add(8, &g_out);
    let d_pre = leaky_relu_backward(&tape.head_pre, &g_out.input);
    let g_hid = conv2d_backward(&tape.h, &params.head_hidden, &d_pre)?;
    grads.add(7, &g_hid);
    let mut dh = g_hid.input;
    if let Some(extra) = d_h {
        dh.add_assign(extra);
    }

    let hidden = params.hidden();
    let (z, r, hc, hp) = (&tape.z, &tape.r, &tape.h_cand, &tape.h_prev);
    let d_zpre = mul(&dh, |i, g| g * (hc.data()[i] - hp.data()[i]) * z.data()[i] * (1.0 - z.data()[i]));
    let d_hcpre = mul(&dh, |i, g| g * z.data()[i] * (1.0 - hc.data()[i] * hc.data()[i]));
    let mut d_hprev = mul(&dh, |i, g| g * (1.0 - z.data()[i]));

    let g_cand = conv2d_backward(&tape.rhx, &params.candidate, &d_hcpre)?;
    grads.add(6, &g_cand);
    let parts = g_cand.input.split_channels(&[hidden, tape.x.channels()])?;
    let (d_rh, mut d_x) = (&parts[0], parts[1].clone());
    let d_rpre = mul(d_rh, |i, g| g * hp.data()[i] * r.data()[i] * (1.0 - r.data()[i]));
    for ((d, g), rr) in d_hprev.data_mut().iter_mut().zip(d_rh.data()).zip(r.data()) {
        *d += g * rr;
    }
    let g_r = conv2d_backward(&tape.hx, &params.gate_r, &d_rpre)?;
    grads.add(5, &g_r);
    let g_z = conv2d_backward(&tape.hx, &params.gate_z, &d_zpre)?;
    grads.add(4, &g_z);
    for g in [&g_r.input, &g_z.input] {
        let parts = g.split_channels(&[hidden, tape.x.channels()])?;
        d_hprev.add_assign(&parts[0]);
        d_x.add_assign(&parts[1]);
    }

    let e = params.embed();
    let dx_parts = d_x.split_channels(&[e, e, e, e])?;
    let g_efx = conv2d_backward(fx, &params.embed_fx, &dx_parts[0])?;
    grads.add(0, &g_efx);
    d_fx.add_assign(&g_efx.input);
    let g_efy = conv2d_backward(&tape.gathered, &params.embed_fy, &dx_parts[1])?;
    grads.add(1, &g_efy);
    let g_eo = conv2d_backward(&tape.offsets, &params.embed_offset, &dx_parts[2])?;
    grads.add(2, &g_eo);
    let g_es = conv2d_backward(&tape.scores, &params.embed_score, &dx_parts[3])?;
    grads.add(3, &g_es);

    for p in 0..h * w {
        let go = g_eo.input.site(p);
        for j in 0..k {
            d_prop[p * k + j][0] += go[2 * j];
            d_prop[p * k + j][1] += go[2 * j + 1];
        }
        let t = prop.candidates(p).0[0];
        let gg = g_efy.input.site(p);
        bilinear_backward_map(d_fy, t[0], t[1], gg);
        let dl = bilinear_backward_location(fy, t[0], t[1], gg);
        d_prop[p * k][0] += dl[0];
        d_prop[p * k][1] += dl[1];
    }
    score_backward(prop, fx, fy, g_es.input.data(), &mut d_prop, d_fx, d_fy);
    Ok((d_prop, d_hprev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn setup(seed: u64) -> (Tensor, Tensor, CorrField) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fx = Tensor::from_fn(4, 5, 3, |_, _, _| rng.gen_range(-1.0..1.0));
        let fy = Tensor::from_fn(4, 5, 3, |_, _, _| rng.gen_range(-1.0..1.0));
        let field = crate::matcher::exhaustive_match(&fx, &fy, 2).unwrap();
        (fx, fy, field)
    }

    #[test]
    fn zero_head_leaves_coordinates_unchanged() {
        let (fx, fy, field) = setup(1);
        let params = RefinerParams::new(3, 2, 6, 4, 3).unwrap();
        assert!(params.head_is_zero());
        let hidden = Tensor::zeros(4, 5, 6);
        let (out, h) = gru_refine_step(&field, &hidden, &fx, &fy, &params, RefineMode::Pure).unwrap();
        assert_eq!(out, field);
        assert!(h.data().iter().all(|v| v.abs() < 1.0));
        assert!(h.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_weights_give_half_gates_and_zero_state() {
        let (fx, fy, field) = setup(2);
        let params = RefinerParams::zeros(3, 2, 6, 4).unwrap();
        let scorer = Scorer::new("test", &fx, &fy).unwrap();
        let (out, tape) =
            step_forward(field.clone(), Tensor::zeros(4, 5, 6), &scorer, &params, RefineMode::Pure).unwrap();
        let (z, r, hc) = tape.gates();
        assert!(z.data().iter().chain(r.data()).all(|&v| v == 0.5));
        assert!(hc.data().iter().all(|&v| v == 0.0));
        assert!(tape.hidden().data().iter().all(|&v| v == 0.0));
        assert_eq!(out, field);
    }

    #[test]
    fn layer_round_trip() {
        let params = RefinerParams::new(5, 3, 4, 2, 9).unwrap();
        let back = refiners_from_layers(refiners_to_layers(&[params.clone(), params.clone()])).unwrap();
        assert_eq!(back, vec![params.clone(), params]);
        let mut layers = refiners_to_layers(&[RefinerParams::zeros(5, 3, 4, 2).unwrap()]);
        layers.swap(0, 1);
        layers.swap(4, 8);
        assert!(refiners_from_layers(layers).is_err());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let (fx, fy, field) = setup(3);
        let params = RefinerParams::zeros(4, 2, 6, 4).unwrap();
        let hidden = Tensor::zeros(4, 5, 6);
        assert!(gru_refine_step(&field, &hidden, &fx, &fy, &params, RefineMode::Pure).is_err());
        let params = RefinerParams::zeros(3, 2, 6, 4).unwrap();
        let hidden = Tensor::zeros(4, 5, 5);
        assert!(gru_refine_step(&field, &hidden, &fx, &fy, &params, RefineMode::Pure).is_err());
    }

    #[test]
    fn greedy_never_lowers_a_moved_score() {
        let (fx, fy, field) = setup(4);
        let mut params = RefinerParams::new(3, 2, 6, 4, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for v in params.head_out.kernel.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let hidden = Tensor::zeros(4, 5, 6);
        let (out, _) = gru_refine_step(&field, &hidden, &fx, &fy, &params, RefineMode::Greedy).unwrap();
        out.validate().unwrap();
        for p in 0..20 {
            assert!(out.candidates(p).1[0] >= field.candidates(p).1[0]);
        }
        let (pure, _) = gru_refine_step(&field, &hidden, &fx, &fy, &params, RefineMode::Pure).unwrap();
        pure.validate().unwrap();
        assert_ne!(pure, field);
    }
    #[test]
    fn step_gradient_matches_finite_differences() {
        use crate::gradcheck::{grad_check, FnOp};
        let (fx, fy, field) = setup(7);
        let field = field.truncated(1).unwrap();
        let mut base = RefinerParams::new(3, 1, 3, 2, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for v in base.head_out.kernel.iter_mut().chain(base.head_out.bias.iter_mut()) {
            *v = rng.gen_range(-0.2..0.2);
        }
        let h0 = Tensor::from_fn(4, 5, 3, |_, _, _| rng.gen_range(-0.5..0.5));
        let scorer = Scorer::new("test", &fx, &fy).unwrap();
        let with = |x: &[Real]| {
            let mut p = base.clone();
            p.load_flat(x);
            p
        };
        let op = FnOp::new(
            |x: &[Real]| {
                let (out, _) = step_forward(field.clone(), h0.clone(), &scorer, &with(x), RefineMode::Pure)?;
                Ok(out.scores().to_vec())
            },
            |x: &[Real], cot: &[Real]| {
                let params = with(x);
                let (out, tape) = step_forward(field.clone(), h0.clone(), &scorer, &params, RefineMode::Pure)?;
                let mut d_coords = vec![[0.0; 2]; cot.len()];
                let mut d_fx = Tensor::zeros(4, 5, 3);
                let mut d_fy = Tensor::zeros(4, 5, 3);
                score_backward(&out, &fx, &fy, cot, &mut d_coords, &mut d_fx, &mut d_fy);
                let mut grads = RefinerGrads::zeros_like(&params);
                step_backward(&tape, &params, &fx, &fy, &d_coords, None, &mut grads, &mut d_fx, &mut d_fy)?;
                Ok(grads.flatten())
            },
        );
        let err = grad_check(&op, &base.flatten(), 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
