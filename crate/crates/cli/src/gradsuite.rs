//! Registry of gradient checks run by `hpmatch gradcheck`.
//!
//! Every entry builds a small random instance from a seed and returns the
//! worst relative error between its hand-written backward pass and central
//! finite differences.

use hpmatch_core::gradcheck::{grad_check, FnOp};
use hpmatch_core::matcher::{CorrField, MatchConfig, Point};
use hpmatch_core::ops::{
    bilinear_backward_location, bilinear_backward_map, bilinear_sample, conv2d, conv2d_backward,
    cosine_backward, cosine_similarity, resample2x, resample2x_backward, softmax_backward, softmax_weights,
    ConvParams, Direction,
};
use hpmatch_core::pyramid::{
    align_loss, align_loss_backward, encoder_backward, encoder_forward, EncoderWeights, ImageRgb, Pyramid,
};
use hpmatch_core::warp::{
    corr_loss, corr_loss_backward, evaluate_corr, make_pseudo_exemplar, objective, soft_warp, soft_warp_backward,
    spade_modulate, spade_modulate_backward, DistortionSpec, Extractor, SpadeProjection, TrainConfig,
};
use hpmatch_core::{Real, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_TOLERANCE: Real = 1e-4;

pub struct GradCheck {
    pub name: &'static str,
    pub tolerance: Real,
    pub run: fn(u64) -> Result<Real>,
}

pub fn registry() -> Vec<GradCheck> {
    let entry = |name, run| GradCheck {
        name,
        tolerance: DEFAULT_TOLERANCE,
        run,
    };
    vec![
        entry("conv2d", check_conv2d),
        entry("cosine_similarity", check_cosine),
        entry("softmax_weights", check_softmax),
        entry("bilinear_sample", check_bilinear),
        entry("resample2x_up", |s| check_resample(s, Direction::Up)),
        entry("resample2x_down", |s| check_resample(s, Direction::Down)),
        entry("soft_warp", check_soft_warp),
        entry("spade_modulate", check_spade),
        entry("corr_loss", check_corr_loss),
        entry("align_loss", check_align_loss),
        entry("encoder", check_encoder),
        GradCheck {
            name: "corr_through_refiner",
            tolerance: 1e-3,
            run: check_end_to_end,
        },
    ]
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(h: usize, w: usize, c: usize, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(h, w, c, |_, _, _| r.gen_range(-1.0..1.0))
}

fn tensor(h: usize, w: usize, c: usize, x: &[Real]) -> Tensor {
    Tensor::from_vec(h, w, c, x.to_vec()).expect("slice length matches shape")
}

fn check_conv2d(seed: u64) -> Result<Real> {
    let mut r = rng(seed);
    let (h, w, ci, co) = (5, 6, 3, 4);
    let input = random(h, w, ci, &mut r);
    let params = ConvParams::random(3, ci, co, 1, 1, 1.0, &mut r)?;
    let n_in = h * w * ci;
    let split = |x: &[Real]| {
        let mut p = params.clone();
        p.load_flat(&x[n_in..]);
        (tensor(h, w, ci, &x[..n_in]), p)
    };
    let op = FnOp::new(
        |x: &[Real]| {
            let (i, p) = split(x);
            Ok(conv2d(&i, &p)?.into_data())
        },
        |x: &[Real], c: &[Real]| {
            let (i, p) = split(x);
            let g = conv2d_backward(&i, &p, &tensor(h, w, co, c))?;
            let mut out = g.input.into_data();
            out.extend(g.kernel);
            out.extend(g.bias);
            Ok(out)
        },
    );
    let mut point = input.into_data();
    params.flatten_into(&mut point);
    grad_check(&op, &point, 1e-5)
}

fn check_cosine(seed: u64) -> Result<Real> {
    let mut r = rng(seed);
    let point: Vec<Real> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
    let op = FnOp::new(
        |x: &[Real]| Ok(vec![cosine_similarity(&x[..8], &x[8..])?]),
        |x: &[Real], c: &[Real]| {
            let (a, b) = cosine_backward(&x[..8], &x[8..], c[0])?;
            Ok([a, b].concat())
        },
    );
    grad_check(&op, &point, 1e-5)
}

fn check_softmax(seed: u64) -> Result<Real> {
    let mut r = rng(seed);
    let tau = 0.5;
    let point: Vec<Real> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
    let op = FnOp::new(
        |x: &[Real]| softmax_weights(x, tau),
        |x: &[Real], c: &[Real]| Ok(softmax_backward(&softmax_weights(x, tau)?, c, tau)),
    );
    grad_check(&op, &point, 1e-5)
}

fn check_bilinear(seed: u64) -> Result<Real> {
    let mut r = rng(seed);
    let (h, w, ch) = (4, 5, 3);
    let map = random(h, w, ch, &mut r);
    let n = h * w * ch;
    let mut point = map.into_data();
    point.push(r.gen_range(0.1..3.9));
    point.push(r.gen_range(0.1..2.9));
    let op = FnOp::new(
        |x: &[Real]| Ok(bilinear_sample(&tensor(h, w, ch, &x[..n]), x[n], x[n + 1])),
        |x: &[Real], c: &[Real]| {
            let m = tensor(h, w, ch, &x[..n]);
            let mut g = Tensor::zeros(h, w, ch);
            bilinear_backward_map(&mut g, x[n], x[n + 1], c);
            let loc = bilinear_backward_location(&m, x[n], x[n + 1], c);
            let mut out = g.into_data();
            out.extend(loc);
            Ok(out)
        },
    );
    grad_check(&op, &point, 1e-5)
}

fn check_resample(seed: u64, direction: Direction) -> Result<Real> {
    let mut r = rng(seed);
    let input = random(4, 6, 2, &mut r);
    let shape = input.shape();
    let op = FnOp::new(
        |x: &[Real]| Ok(resample2x(&tensor(4, 6, 2, x), direction)?.into_data()),
        |x: &[Real], c: &[Real]| {
            let out = resample2x(&tensor(4, 6, 2, x), direction)?;
            let g = tensor(out.height(), out.width(), 2, c);
            Ok(resample2x_backward(shape, direction, &g)?.into_data())
        },
    );
    grad_check(&op, input.data(), 1e-5)
}

/// Scores descend in steps of 0.2 within each position, so finite
/// differences never reorder candidates.
fn random_field(h: usize, w: usize, k: usize, th: usize, tw: usize, r: &mut ChaCha8Rng) -> Result<CorrField> {
    let n = h * w * k;
    let coords: Vec<Point> = (0..n)
        .map(|_| [r.gen_range(0.05..tw as Real - 1.05), r.gen_range(0.05..th as Real - 1.05)])
        .collect();
    let scores = (0..n)
        .map(|i| 0.5 - 0.2 * (i % k) as Real + r.gen_range(-0.05..0.05))
        .collect();
    CorrField::new(h, w, k, th, tw, coords, scores)
}

fn check_soft_warp(seed: u64) -> Result<Real> {
    let mut r = rng(seed);
    let (h, w, k, th, tw) = (4, 4, 3, 5, 6);
    let ex = Tensor::from_fn(th, tw, 3, |_, _, _| r.gen_range(0.0..1.0));
    let field = random_field(h, w, k, th, tw, &mut r)?;
    let tau = 0.5;
    let n = h * w * k;
    let split = |x: &[Real]| -> Result<(CorrField, Tensor)> {
        let coords = (0..n).map(|i| [x[2 * i], x[2 * i + 1]]).collect();
        let f = CorrField::new(h, w, k, th, tw, coords, x[2 * n..3 * n].to_vec())?;
        Ok((f, tensor(th, tw, 3, &x[3 * n..])))
    };
    let op = FnOp::new(
        |x: &[Real]| {
            let (f, e) = split(x)?;
            Ok(soft_warp(&e, &f, tau)?.image.into_data())
        },
        |x: &[Real], c: &[Real]| {
            let (f, e) = split(x)?;
            let res = soft_warp(&e, &f, tau)?;
            let g = soft_warp_backward(&e, &f, &res, &tensor(h, w, 3, c))?;
            let mut out: Vec<Real> = g.coords.iter().flat_map(|c| *c).collect();
            out.extend(g.scores);
            out.extend(g.exemplar.into_data());
            Ok(out)
        },
    );
    let mut point: Vec<Real> = field.coords().iter().flat_map(|c| *c).collect();
    point.extend_from_slice(field.scores());
    point.extend_from_slice(ex.data());
    grad_check(&op, &point, 1e-5)
}

fn check_spade(seed: u64) -> Result<Real> {
    let mut r = rng(seed);
    let (h, w, c, cs) = (4, 4, 3, 6);
    let act = random(h, w, c, &mut r);
    let stack = random(h, w, cs, &mut r);
    let proj = SpadeProjection::new(
        ConvParams::random(3, cs, c, 1, 1, 1.0, &mut r)?,
        ConvParams::random(3, cs, c, 1, 1, 1.0, &mut r)?,
    )?;
    let (na, ns) = (h * w * c, h * w * cs);
    let split = |x: &[Real]| {
        let mut p = proj.clone();
        let rest = p.alpha.load_flat(&x[na + ns..]);
        p.beta.load_flat(rest);
        (tensor(h, w, c, &x[..na]), tensor(h, w, cs, &x[na..na + ns]), p)
    };
    let op = FnOp::new(
        |x: &[Real]| {
            let (a, s, p) = split(x);
            Ok(spade_modulate(&a, &s, &p)?.into_data())
        },
        |x: &[Real], cot: &[Real]| {
            let (a, s, p) = split(x);
            let g = spade_modulate_backward(&a, &s, &p, &tensor(h, w, c, cot))?;
            let mut out = g.activation.into_data();
            out.extend(g.stack.into_data());
            g.alpha.flatten_into(&mut out);
            g.beta.flatten_into(&mut out);
            Ok(out)
        },
    );
    let mut point = act.into_data();
    point.extend(stack.into_data());
    proj.alpha.flatten_into(&mut point);
    proj.beta.flatten_into(&mut point);
    grad_check(&op, &point, 1e-5)
}

fn check_corr_loss(seed: u64) -> Result<Real> {
    let mut r = rng(seed);
    let target = ImageRgb::from_fn(8, 8, |_, _, _| r.gen_range(0.0..1.0));
    let sizes = [2usize, 4, 8];
    let point: Vec<Real> = sizes
        .iter()
        .flat_map(|&s| (0..s * s * 3).map(|_| r.gen_range(0.0..1.0)).collect::<Vec<_>>())
        .collect();
    let split = |x: &[Real]| {
        let mut off = 0;
        sizes
            .iter()
            .map(|&s| {
                let t = tensor(s, s, 3, &x[off..off + s * s * 3]);
                off += s * s * 3;
                t
            })
            .collect::<Vec<_>>()
    };
    let op = FnOp::new(
        |x: &[Real]| Ok(vec![corr_loss(&split(x), &target)?]),
        |x: &[Real], c: &[Real]| {
            let g = corr_loss_backward(&split(x), &target)?;
            Ok(g.iter().flat_map(|t| t.data().iter().map(|v| v * c[0])).collect())
        },
    );
    grad_check(&op, &point, 1e-6)
}

fn check_align_loss(seed: u64) -> Result<Real> {
    let mut r = rng(seed);
    let target = Pyramid::new(vec![random(2, 2, 4, &mut r), random(4, 4, 2, &mut r)])?;
    let point: Vec<Real> = (0..2 * 2 * 4 + 4 * 4 * 2).map(|_| r.gen_range(-1.0..1.0)).collect();
    let split = |x: &[Real]| Pyramid::new(vec![tensor(2, 2, 4, &x[..16]), tensor(4, 4, 2, &x[16..])]);
    let op = FnOp::new(
        |x: &[Real]| Ok(vec![align_loss(&split(x)?, &target)?]),
        |x: &[Real], c: &[Real]| {
            let g = align_loss_backward(&split(x)?, &target)?;
            Ok(g.iter().flat_map(|t| t.data().iter().map(|v| v * c[0])).collect())
        },
    );
    grad_check(&op, &point, 1e-6)
}

fn check_encoder(seed: u64) -> Result<Real> {
    let mut r = rng(seed);
    let weights = EncoderWeights::random(2, 2, seed)?;
    let image = ImageRgb::from_fn(4, 4, |_, _, _| r.gen_range(0.0..1.0));
    let with = |x: &[Real]| {
        let mut w = weights.clone();
        let mut rest = x;
        for l in w.layers_mut() {
            rest = l.load_flat(rest);
        }
        w
    };
    let op = FnOp::new(
        |x: &[Real]| {
            let (pyr, _) = encoder_forward(&image, &with(x))?;
            Ok(pyr.levels().iter().flat_map(|t| t.data().to_vec()).collect())
        },
        |x: &[Real], c: &[Real]| {
            let w = with(x);
            let (pyr, tape) = encoder_forward(&image, &w)?;
            let mut off = 0;
            let grads: Vec<Tensor> = pyr
                .levels()
                .iter()
                .map(|t| {
                    let g = tensor(t.height(), t.width(), t.channels(), &c[off..off + t.len()]);
                    off += t.len();
                    g
                })
                .collect();
            let mut out = Vec::new();
            for g in encoder_backward(&tape, &w, &grads)? {
                g.flatten_into(&mut out);
            }
            Ok(out)
        },
    );
    let mut point = Vec::new();
    for l in weights.layers() {
        l.flatten_into(&mut point);
    }
    grad_check(&op, &point, 1e-6)
}

struct EndToEnd {
    source: ImageRgb,
    exemplar: ImageRgb,
    extractor: Extractor,
    refiners: Vec<hpmatch_core::matcher::RefinerParams>,
    config: TrainConfig,
}

/// A 2-level 8x8 pair with a random displacement head, so that the
/// refiner actually moves coordinates.
fn end_to_end_instance(seed: u64) -> Result<EndToEnd> {
    let mut r = rng(seed);
    let phase: Real = r.gen_range(0.0..6.0);
    let source = ImageRgb::from_fn(8, 8, |y, x, c| {
        let (u, v) = (x as Real, y as Real);
        0.5 + 0.25 * (0.9 * u + 0.4 * v + phase + c as Real).sin() + 0.2 * (0.3 * u - 0.7 * v).cos()
    });
    let (exemplar, _) = make_pseudo_exemplar(&source, &DistortionSpec::translation(1.0, 0.0))?;
    let mc = MatchConfig {
        k: 2,
        levels: 2,
        iters: 1,
        temperature: 0.5,
        hidden: 3,
        embed: 2,
        ..Default::default()
    };
    let extractor = Extractor::Handcrafted { radius: 1 };
    let (px, _) = extractor.pyramids(&source, &exemplar, 2)?;
    let mut refiners = mc.default_refiners(&px, seed)?;
    for v in refiners[0].head_out.kernel.iter_mut() {
        *v = r.gen_range(-0.05..0.05);
    }
    let config = TrainConfig {
        match_config: mc,
        joint_encoder: false,
        lambda_align: 0.0,
        ..Default::default()
    };
    Ok(EndToEnd {
        source,
        exemplar,
        extractor,
        refiners,
        config,
    })
}

/// `L_corr` as a function of every parameter of the refiner.
fn check_end_to_end(seed: u64) -> Result<Real> {
    let e = end_to_end_instance(seed)?;
    let mc = e.config.match_config;
    let with = |x: &[Real]| {
        let mut refiners = e.refiners.clone();
        refiners[0].load_flat(x);
        refiners
    };
    let op = FnOp::new(
        |x: &[Real]| Ok(vec![evaluate_corr(&e.source, &e.exemplar, &e.extractor, &with(x), &mc)?]),
        |x: &[Real], c: &[Real]| {
            let obj = objective(&e.source, &e.exemplar, &e.extractor, &with(x), &e.config)?;
            Ok(obj.grads[0].flatten().iter().map(|g| g * c[0]).collect())
        },
    );
    grad_check(&op, &e.refiners[0].flatten(), 1e-6)
}
