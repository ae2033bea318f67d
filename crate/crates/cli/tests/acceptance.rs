//! Acceptance suite: one PASS/FAIL line per requirement, nonzero exit on any
//! failure.

use std::alloc::{GlobalAlloc, Layout, System};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use hpmatch_cli::bench::{run_bench, synthetic_pair, top1_agreement, BenchConfig, PairKind};
use hpmatch_cli::gradsuite::registry;
use hpmatch_cli::imageio::{encode_png, load_png};
use hpmatch_core::adam::AdamConfig;
use hpmatch_core::matcher::{
    exhaustive_match, hierarchical_match, offsets_scores, propagate, upsample_field, CorrField, MatchConfig,
    RefinerParams,
};
use hpmatch_core::ops::{bilinear_sample, downsample_to};
use hpmatch_core::pyramid::{extract_pyramid_handcrafted, ImageRgb};
use hpmatch_core::warp::{
    make_pseudo_exemplar, psnr, random_distortion, soft_warp, train_refiner, DistortionRange, DistortionSpec,
    Extractor, PseudoPairs, TrainConfig,
};
use hpmatch_core::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = LIVE.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Peak bytes allocated on top of what was live when `f` started.
fn peak_during<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = LIVE.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let out = f();
    (out, PEAK.load(Ordering::Relaxed) - base)
}

type Outcome = Result<(bool, String), String>;

const NATURAL: [&str; 10] = [
    "astronaut",
    "camera",
    "chelsea",
    "coffee",
    "coins",
    "immunohistochemistry",
    "moon",
    "retina",
    "rocket",
    "stereo_motorcycle",
];

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/natural")
}

fn natural(name: &str) -> Result<ImageRgb, String> {
    load_png(&data_dir().join(format!("{name}.png"))).map_err(|e| e.to_string())
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn distance(a: [Real; 2], b: [Real; 2]) -> Real {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Hierarchical matching against a per-level exhaustive oracle on
/// translated 32x32 natural images. Shifts lie on the 2-pixel lattice that
/// a two-level hierarchy can represent; positions whose true match falls
/// outside the exemplar are excluded.
fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let levels = 2;
    let shifts = [(2.0, 0.0), (0.0, -2.0), (2.0, 2.0), (-2.0, 2.0), (4.0, 0.0), (0.0, 4.0)];
    let mc = MatchConfig {
        levels,
        hidden: hpmatch_cli::BENCH_HIDDEN,
        embed: hpmatch_cli::BENCH_EMBED,
        ..MatchConfig::default()
    };
    let (mut hits, mut total, mut worst) = (0usize, 0usize, 1.0 as Real);
    for name in NATURAL {
        let big = natural(name)?;
        let img = ImageRgb::new(downsample_to(big.tensor(), 32, 32).map_err(e)?).map_err(e)?;
        for (dx, dy) in shifts {
            let (ex, _) = make_pseudo_exemplar(&img, &DistortionSpec::translation(dx, dy)).map_err(e)?;
            let px = extract_pyramid_handcrafted(&img, levels, 1).map_err(e)?;
            let py = extract_pyramid_handcrafted(&ex, levels, 1).map_err(e)?;
            let refiners = mc.default_refiners(&px, 0).map_err(e)?;
            let fields = hierarchical_match(&px, &py, &refiners, &mc).map_err(e)?;
            let (mut h, mut n) = (0, 0);
            for (l, f) in fields.iter().enumerate() {
                let oracle = exhaustive_match(px.level(l), py.level(l), mc.k).map_err(e)?;
                let s = (1usize << l) as Real / (1usize << (levels - 1)) as Real;
                for p in 0..f.positions() {
                    let (x, y) = ((p % f.width()) as Real, (p / f.width()) as Real);
                    let (qx, qy) = (x - dx * s, y - dy * s);
                    if qx < 0.0 || qy < 0.0 || qx > (f.width() - 1) as Real || qy > (f.height() - 1) as Real {
                        continue;
                    }
                    n += 1;
                    if distance(f.candidates(p).0[0], oracle.candidates(p).0[0]) <= 1.0 {
                        h += 1;
                    }
                }
            }
            worst = worst.min(h as Real / n as Real);
            hits += h;
            total += n;
        }
    }
    let rate = hits as Real / total as Real;
    let elapsed = start.elapsed();
    Ok((
        rate >= 0.9 && elapsed < Duration::from_secs(10),
        format!(
            "top-1 agreement {:.1}% over {} pairs (worst pair {:.1}%), {:.1}s",
            100.0 * rate,
            NATURAL.len() * shifts.len(),
            100.0 * worst,
            elapsed.as_secs_f64()
        ),
    ))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = String::new();
    let mut ok = true;
    let mut max_ratio = 0.0 as Real;
    for check in registry() {
        let err = (check.run)(0).map_err(|x| format!("{}: {x}", check.name))?;
        let ratio = err / check.tolerance;
        if ratio > max_ratio {
            max_ratio = ratio;
            worst = format!("{} {:.2e} (tol {:.0e})", check.name, err, check.tolerance);
        }
        ok &= err <= check.tolerance;
    }
    let elapsed = start.elapsed();
    Ok((
        ok && elapsed < Duration::from_secs(60),
        format!("{} ops, worst {}, {:.1}s", registry().len(), worst, elapsed.as_secs_f64()),
    ))
}

/// Multi-octave value noise with a few flat discs, in `[0, 1]`.
fn procedural_texture(seed: u64, size: usize) -> ImageRgb {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(size, size, 3);
    let mut amp = 0.5;
    for o in 0..4 {
        let cell = 2usize << o;
        let g = size / cell + 2;
        let lattice = Tensor::from_fn(g, g, 3, |_, _, _| rng.gen_range(-1.0..1.0));
        for y in 0..size {
            for x in 0..size {
                let v = bilinear_sample(&lattice, x as Real / cell as Real, y as Real / cell as Real);
                for (d, s) in t.pixel_mut(y, x).iter_mut().zip(&v) {
                    *d += amp * s;
                }
            }
        }
        amp *= 0.8;
    }
    for _ in 0..6 {
        let (cx, cy) = (rng.gen_range(0.0..size as Real), rng.gen_range(0.0..size as Real));
        let r = rng.gen_range(4.0..size as Real / 3.0);
        let col: [Real; 3] = [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0));
        for y in 0..size {
            for x in 0..size {
                if distance([x as Real, y as Real], [cx, cy]) < r {
                    t.pixel_mut(y, x).copy_from_slice(&col);
                }
            }
        }
    }
    ImageRgb::from_fn(size, size, |y, x, c| 0.5 + 0.35 * t.get(y, x, c))
}

/// Refiners trained briefly on pseudo pairs of procedural textures, which
/// share nothing with the evaluation images.
fn texture_refiners(mc: &MatchConfig) -> Result<Vec<RefinerParams>, String> {
    let images: Vec<ImageRgb> = (0..8).map(|s| procedural_texture(s, 64)).collect();
    let pairs = PseudoPairs::new(images, DistortionRange::default(), 100).map_err(e)?;
    let extractor = Extractor::Handcrafted { radius: 1 };
    let (s0, e0) = pairs.pair(0).map_err(e)?;
    let (px, _) = extractor.pyramids(&s0, &e0, mc.levels).map_err(e)?;
    let config = TrainConfig {
        match_config: *mc,
        steps: 40,
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        joint_encoder: false,
        ..TrainConfig::default()
    };
    let init = mc.default_refiners(&px, 100).map_err(e)?;
    Ok(train_refiner(|s| pairs.pair(s), init, extractor, &config).map_err(e)?.refiners)
}

/// The coarsest field carried to full resolution without refinement, with
/// scores recomputed on the finest features.
fn coarsest_only(coarse: &CorrField, fx: &Tensor, fy: &Tensor, levels: usize) -> Result<CorrField, String> {
    let mut f = coarse.clone();
    for _ in 1..levels {
        f = upsample_field(&f);
    }
    let (_, scores) = offsets_scores(&f, fx, fy).map_err(e)?;
    CorrField::from_unsorted(
        f.height(),
        f.width(),
        f.k(),
        f.target_height(),
        f.target_width(),
        f.coords().to_vec(),
        scores.into_data(),
    )
    .map_err(e)
}

fn multi_level_trend() -> Outcome {
    let levels = 4;
    let mc = MatchConfig {
        levels,
        hidden: 16,
        embed: 4,
        ..MatchConfig::default()
    };
    let trained = texture_refiners(&mc)?;
    let margin = 16;
    let (mut wins, mut zero_head_wins) = (0, 0);
    let mut gains = Vec::new();
    for (i, name) in NATURAL.iter().enumerate() {
        let img = natural(name)?;
        let spec = random_distortion(256, 256, &DistortionRange::default().affine_only(), i as u64).map_err(e)?;
        let (ex, _) = make_pseudo_exemplar(&img, &spec).map_err(e)?;
        let px = extract_pyramid_handcrafted(&img, levels, 1).map_err(e)?;
        let py = extract_pyramid_handcrafted(&ex, levels, 1).map_err(e)?;
        let warp_psnr = |f: &CorrField| -> Result<Real, String> {
            let w = soft_warp(ex.tensor(), f, mc.temperature).map_err(e)?.image;
            psnr(&w, img.tensor(), margin).map_err(e)
        };
        let full = hierarchical_match(&px, &py, &trained, &mc).map_err(e)?;
        let coarse = coarsest_only(&full[0], px.finest(), py.finest(), levels)?;
        let (a, b) = (warp_psnr(&full[levels - 1])?, warp_psnr(&coarse)?);
        wins += usize::from(a > b);
        gains.push(a - b);
        let untrained = hierarchical_match(&px, &py, &mc.default_refiners(&px, 0).map_err(e)?, &mc).map_err(e)?;
        zero_head_wins += usize::from(warp_psnr(&untrained[levels - 1])? > b);
    }
    let min_gain = gains.iter().cloned().fold(Real::INFINITY, Real::min);
    Ok((
        wins >= 9,
        format!(
            "all levels beat coarsest-only on {wins}/10 images (min gain {min_gain:.2} dB; \
             zero displacement head: {zero_head_wins}/10)"
        ),
    ))
}

fn propagation_monotone() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (s, c, k) = (16, 8, 4);
    let mut calls = 0;
    for _ in 0..100 {
        let fx = Tensor::from_fn(s, s, c, |_, _, _| rng.gen_range(-1.0..1.0));
        let fy = Tensor::from_fn(s, s, c, |_, _, _| rng.gen_range(-1.0..1.0));
        let coords: Vec<[Real; 2]> = (0..s * s * k)
            .map(|_| [rng.gen_range(0.0..(s - 1) as Real), rng.gen_range(0.0..(s - 1) as Real)])
            .collect();
        let seeded = CorrField::from_unsorted(s, s, k, s, s, coords.clone(), vec![0.0; s * s * k]).map_err(e)?;
        let (_, scores) = offsets_scores(&seeded, &fx, &fy).map_err(e)?;
        let mut field = CorrField::from_unsorted(s, s, k, s, s, coords, scores.into_data()).map_err(e)?;
        for _ in 0..3 {
            let next = propagate(&field, &fx, &fy).map_err(e)?;
            calls += 1;
            for p in 0..field.positions() {
                if next.candidates(p).1[0] < field.candidates(p).1[0] {
                    return Ok((false, format!("best score decreased at position {p}")));
                }
            }
            field = next;
        }
    }
    Ok((true, format!("{calls} propagate calls on 100 instances, no decrease")))
}

fn complexity() -> Outcome {
    let mc = MatchConfig {
        k: 16,
        levels: 4,
        iters: 3,
        hidden: hpmatch_cli::BENCH_HIDDEN,
        embed: hpmatch_cli::BENCH_EMBED,
        ..MatchConfig::default()
    };
    let config = BenchConfig {
        size: 128,
        channels: 32,
        kind: PairKind::Translation,
        match_config: mc,
        seed: 0,
    };
    let (mut ex_ms, mut hi_ms) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..2 {
        let row = run_bench(&config, None).map_err(e)?;
        ex_ms = ex_ms.min(row.exhaustive_ms);
        hi_ms = hi_ms.min(row.hierarchical_ms);
    }
    let speedup = ex_ms / hi_ms;

    let mut ex_peak = Vec::new();
    let mut hi_peak = Vec::new();
    for size in [32, 64] {
        let pair = synthetic_pair(size, 32, mc.levels, PairKind::Translation, 1).map_err(e)?;
        let refiners = mc.default_refiners(&pair.source, 0).map_err(e)?;
        let (r, bytes) = peak_during(|| exhaustive_match(pair.source.finest(), pair.exemplar.finest(), mc.k));
        let exhaustive = r.map_err(e)?;
        ex_peak.push(bytes as f64);
        let (r, bytes) = peak_during(|| hierarchical_match(&pair.source, &pair.exemplar, &refiners, &mc));
        let fields = r.map_err(e)?;
        hi_peak.push(bytes as f64);
        let _ = top1_agreement(fields.last().expect("levels"), &exhaustive);
    }
    let (ex_ratio, hi_ratio) = (ex_peak[1] / ex_peak[0], hi_peak[1] / hi_peak[0]);
    let quadratic = (12.0..=20.0).contains(&ex_ratio);
    let linear = (3.0..=5.0).contains(&hi_ratio);
    Ok((
        speedup >= 10.0 && quadratic && linear,
        format!(
            "128x128: exhaustive {ex_ms:.0} ms, hierarchical {hi_ms:.0} ms, speedup {speedup:.1}x; \
             peak memory 32->64 (4x positions): exhaustive x{ex_ratio:.2}, hierarchical x{hi_ratio:.2}"
        ),
    ))
}

fn trainer_sanity() -> Outcome {
    let start = Instant::now();
    let img = ImageRgb::from_fn(64, 64, |y, x, c| {
        let (u, v) = (x as Real, y as Real);
        0.5 + 0.25 * (0.31 * u + 0.17 * v + c as Real).sin() * (0.11 * u - 0.23 * v).cos()
            + 0.15 * (0.05 * u * v / 8.0).sin()
    });
    let spec = DistortionSpec::similarity(64, 64, 0.1, 1.05, 2.0, -1.5);
    let (ex, _) = make_pseudo_exemplar(&img, &spec).map_err(e)?;
    let mc = MatchConfig {
        k: 4,
        levels: 4,
        iters: 3,
        hidden: 16,
        embed: 4,
        ..MatchConfig::default()
    };
    let extractor = Extractor::Handcrafted { radius: 1 };
    let (px, _) = extractor.pyramids(&img, &ex, 4).map_err(e)?;
    let config = TrainConfig {
        match_config: mc,
        steps: 200,
        joint_encoder: false,
        ..TrainConfig::default()
    };
    let out = train_refiner(
        |_| Ok((img.clone(), ex.clone())),
        mc.default_refiners(&px, 2).map_err(e)?,
        extractor,
        &config,
    )
    .map_err(e)?;
    let corr: Vec<Real> = out.losses.iter().map(|r| r.corr).collect();
    let ma: Vec<Real> = corr.windows(20).map(|w| w.iter().sum::<Real>() / 20.0).collect();
    let violations = ma.windows(2).filter(|w| w[1] >= w[0]).count();
    let elapsed = start.elapsed();
    Ok((
        violations == 0 && elapsed < Duration::from_secs(300),
        format!(
            "moving average {:.4} -> {:.4}, {violations} non-decreasing steps, {:.0}s",
            ma[0],
            ma[ma.len() - 1],
            elapsed.as_secs_f64()
        ),
    ))
}

fn hpmatch(args: &[&str], threads: usize) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hpmatch"))
        .args(args)
        .args(["--threads", &threads.to_string()])
        .output()
        .map_err(e)?;
    if !out.status.success() {
        return Err(format!("hpmatch {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn read_all(paths: &[PathBuf]) -> Result<Vec<Vec<u8>>, String> {
    paths.iter().map(|p| std::fs::read(p).map_err(|x| format!("{}: {x}", p.display()))).collect()
}

/// Drops the wall-clock columns of a bench report.
fn without_timings(csv: &[u8]) -> String {
    String::from_utf8_lossy(csv)
        .lines()
        .map(|l| {
            l.split(',')
                .enumerate()
                .filter(|(i, _)| !(5..=7).contains(i))
                .map(|(_, f)| f)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let d = dir.path();
    let camera = natural("camera")?;
    let small = downsample_to(camera.tensor(), 64, 64).map_err(e)?;
    let (ex, _) = make_pseudo_exemplar(
        &ImageRgb::new(small.clone()).map_err(e)?,
        &DistortionSpec::similarity(64, 64, 0.05, 1.02, 1.0, 2.0),
    )
    .map_err(e)?;
    let src_png = d.join("src.png");
    let ex_png = d.join("ex.png");
    std::fs::write(&src_png, encode_png(&small).map_err(e)?).map_err(e)?;
    std::fs::write(&ex_png, encode_png(ex.tensor()).map_err(e)?).map_err(e)?;
    let train_dir = d.join("train");
    std::fs::create_dir(&train_dir).map_err(e)?;
    for (i, name) in ["coins", "moon"].iter().enumerate() {
        let t = downsample_to(natural(name)?.tensor(), 32, 32).map_err(e)?;
        std::fs::write(train_dir.join(format!("{i}.png")), encode_png(&t).map_err(e)?).map_err(e)?;
    }
    let s = |p: &Path| p.to_string_lossy().into_owned();
    let small_net = ["--levels", "3", "--hidden", "8", "--embed", "4"];

    let mut checked = Vec::new();
    let mut runs: Vec<Vec<Vec<u8>>> = Vec::new();
    for (run, threads) in [1, 1, 8].into_iter().enumerate() {
        let out = d.join(format!("run{run}"));
        let mut files = Vec::new();
        let mut args = vec!["match".to_string(), s(&src_png), s(&ex_png), "-o".into(), s(&out)];
        args.extend(small_net.iter().map(|a| a.to_string()));
        hpmatch(&args.iter().map(String::as_str).collect::<Vec<_>>(), threads)?;
        files.extend(["level0.corr", "level1.corr", "level2.corr", "flow.png", "warped.png"].map(|f| out.join(f)));

        let warped = out.join("rewarp.png");
        hpmatch(&["warp", &s(&ex_png), &s(&out.join("level2.corr")), "-o", &s(&warped)], threads)?;
        files.push(warped);

        let (refiner, loss) = (out.join("refiner.cmwt"), out.join("loss.csv"));
        let mut args = vec![
            "train".to_string(),
            s(&train_dir),
            "-o".into(),
            s(&refiner),
            "--loss-csv".into(),
            s(&loss),
            "--steps".into(),
            "3".into(),
            "--topk".into(),
            "4".into(),
        ];
        args.extend(small_net.iter().map(|a| a.to_string()));
        hpmatch(&args.iter().map(String::as_str).collect::<Vec<_>>(), threads)?;
        files.extend([refiner, loss]);

        let (refiner, loss, enc) = (out.join("joint.cmwt"), out.join("joint.csv"), out.join("encoder.cmwt"));
        let mut args = vec![
            "train".to_string(),
            s(&train_dir),
            "-o".into(),
            s(&refiner),
            "--loss-csv".into(),
            s(&loss),
            "--encoder-out".into(),
            s(&enc),
            "--extractor".into(),
            "encoder".into(),
            "--base-width".into(),
            "2".into(),
            "--steps".into(),
            "2".into(),
            "--topk".into(),
            "4".into(),
        ];
        args.extend(small_net.iter().map(|a| a.to_string()));
        hpmatch(&args.iter().map(String::as_str).collect::<Vec<_>>(), threads)?;
        files.extend([refiner, loss, enc]);

        let mut contents = read_all(&files)?;
        contents.push(hpmatch(&["gradcheck", "--seed", "3"], threads)?);
        let bench = hpmatch(&["bench", "--sizes", "32", "--levels", "3"], threads)?;
        contents.push(without_timings(&bench).into_bytes());
        if checked.is_empty() {
            checked = files
                .iter()
                .map(|f| f.file_name().unwrap().to_string_lossy().into_owned())
                .chain(["gradcheck stdout".into(), "bench report".into()])
                .collect();
        }
        runs.push(contents);
    }
    let mismatched: Vec<&str> = (0..checked.len())
        .filter(|&i| runs[1][i] != runs[0][i] || runs[2][i] != runs[0][i])
        .map(|i| checked[i].as_str())
        .collect();
    Ok((
        mismatched.is_empty(),
        if mismatched.is_empty() {
            format!("{} outputs of match, warp, train, gradcheck and bench identical across 2 runs and 1/8 threads", checked.len())
        } else {
            format!("differing outputs: {}", mismatched.join(", "))
        },
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("oracle equivalence", oracle_equivalence),
        ("gradient suite", gradient_suite),
        ("multi-level warp trend", multi_level_trend),
        ("propagation monotonicity", propagation_monotone),
        ("complexity", complexity),
        ("trainer sanity", trainer_sanity),
        ("determinism", determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let (ok, detail) = match run() {
            Ok(r) => r,
            Err(msg) => (false, format!("error: {msg}")),
        };
        failed += usize::from(!ok);
        println!("{} {}. {name}: {detail}", if ok { "PASS" } else { "FAIL" }, i + 1);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
