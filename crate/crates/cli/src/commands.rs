//! The five commands. Each returns the process exit code; every file it
//! produces goes through [`Outputs`] so a failure leaves nothing behind.

use std::io::Write;
use std::path::{Path, PathBuf};

use hpmatch_core::adam::AdamConfig;
use hpmatch_core::matcher::{hierarchical_match, load_refiners, refiners_to_layers, RefinerParams};
use hpmatch_core::pyramid::{check_divisible, encode_layers, DomainEncoders, EncoderWeights, ImageRgb};
use hpmatch_core::warp::{
    soft_warp, train_refiner, DistortionRange, Extractor, PseudoPairs, TrainConfig, LOSS_CSV_HEADER,
};
use hpmatch_core::{Real, Tensor};

use crate::bench::{run_bench, BenchConfig, PairKind, BENCH_CSV_HEADER};
use crate::config::{ExtractorKind, RunConfig};
use crate::error::{CliError, Result};
use crate::fieldfile::FieldFile;
use crate::gradsuite::registry;
use crate::imageio::{encode_png, flow_to_rgb, load_png};
use crate::output::Outputs;

fn extractor(cfg: &RunConfig) -> Result<Extractor> {
    Ok(match cfg.extractor {
        ExtractorKind::Handcrafted => Extractor::Handcrafted { radius: cfg.radius },
        ExtractorKind::Encoder => {
            cfg.require_weights()?;
            let path = cfg.weights.as_ref().expect("checked above");
            Extractor::Encoder(DomainEncoders::load(path)?)
        }
    })
}

fn refiners(cfg: &RunConfig, fallback: impl FnOnce() -> hpmatch_core::Result<Vec<RefinerParams>>) -> Result<Vec<RefinerParams>> {
    Ok(match &cfg.refiner {
        Some(path) => load_refiners(path)?,
        None => fallback()?,
    })
}

pub fn level_file_name(level: usize) -> String {
    format!("level{level}.corr")
}

/// Top-1 offsets of a field as an `H x W x 2` map.
fn top1_flow(field: &hpmatch_core::matcher::CorrField) -> Tensor {
    Tensor::from_fn(field.height(), field.width(), 2, |y, x, c| {
        let q = field.top1(y, x);
        q[c] - if c == 0 { x as Real } else { y as Real }
    })
}

pub fn cmd_match(cfg: &RunConfig, source: &Path, exemplar: &Path, out_dir: &Path) -> Result<i32> {
    let ext = extractor(cfg)?;
    let src = load_png(source)?;
    let ex = load_png(exemplar)?;
    for img in [&src, &ex] {
        check_divisible(img.height(), img.width(), cfg.levels)?;
    }
    let mc = cfg.match_config();
    let (px, py) = ext.pyramids(&src, &ex, mc.levels)?;
    let refiners = refiners(cfg, || mc.default_refiners(&px, cfg.seed))?;
    let fields = hierarchical_match(&px, &py, &refiners, &mc)?;

    let mut out = Outputs::default();
    for (l, f) in fields.iter().enumerate() {
        out.add(out_dir.join(level_file_name(l)), FieldFile::from_field(f).encode());
    }
    let finest = fields.last().expect("at least one level");
    let diagonal = (src.height() as Real).hypot(src.width() as Real);
    out.add(out_dir.join("flow.png"), encode_png(&flow_to_rgb(&top1_flow(finest), diagonal))?);
    let warped = soft_warp(ex.tensor(), finest, mc.temperature)?.image;
    out.add(out_dir.join("warped.png"), encode_png(&warped)?);
    out.commit()?;
    Ok(0)
}

pub fn cmd_warp(cfg: &RunConfig, exemplar: &Path, field: &Path, out_path: &Path) -> Result<i32> {
    let ex = load_png(exemplar)?;
    let bytes = std::fs::read(field).map_err(|e| CliError::io(field, e))?;
    let field = FieldFile::decode(&bytes)?.into_field(ex.height(), ex.width())?;
    let warped = soft_warp(ex.tensor(), &field, cfg.tau)?.image;
    let mut out = Outputs::default();
    out.add(out_path, encode_png(&warped)?);
    out.commit()?;
    Ok(0)
}

pub struct TrainArgs {
    pub images: PathBuf,
    pub out: PathBuf,
    pub loss_csv: PathBuf,
    pub encoder_out: Option<PathBuf>,
    pub steps: usize,
    pub lr: Real,
    pub lambda_align: Real,
    pub base_width: usize,
    pub freeze_head: bool,
    pub refiner_only: bool,
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("{}: no PNG images found", dir.display())));
    }
    Ok(files)
}

pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<i32> {
    let images = png_files(&args.images)?
        .iter()
        .map(|p| {
            let img = load_png(p)?;
            check_divisible(img.height(), img.width(), cfg.levels)?;
            Ok(img)
        })
        .collect::<Result<Vec<ImageRgb>>>()?;
    let ext = match (cfg.extractor, &cfg.weights) {
        (ExtractorKind::Encoder, None) => Extractor::Encoder(DomainEncoders::shared(EncoderWeights::random(
            cfg.levels,
            args.base_width,
            cfg.seed,
        )?)),
        _ => extractor(cfg)?,
    };
    let pairs = PseudoPairs::new(images, DistortionRange::default(), cfg.seed)?;
    let (src, ex) = pairs.pair(0)?;
    let mc = cfg.match_config();
    let (px, _) = ext.pyramids(&src, &ex, mc.levels)?;
    let initial = refiners(cfg, || mc.default_refiners(&px, cfg.seed))?;

    let config = TrainConfig {
        match_config: mc,
        steps: args.steps,
        adam: AdamConfig {
            lr: args.lr,
            ..AdamConfig::default()
        },
        lambda_align: args.lambda_align,
        freeze_head: args.freeze_head,
        joint_encoder: !args.refiner_only,
        ..TrainConfig::default()
    };
    let trained = train_refiner(|s| pairs.pair(s), initial, ext, &config)?;

    let mut csv = format!("{LOSS_CSV_HEADER}\n");
    for r in &trained.losses {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    let mut out = Outputs::default();
    out.add(&args.out, encode_layers(&refiners_to_layers(&trained.refiners))?);
    out.add(&args.loss_csv, csv.into_bytes());
    if let Some(path) = &args.encoder_out {
        match &trained.extractor {
            Extractor::Encoder(enc) => out.add(path, encode_layers(&enc.to_layers())?),
            Extractor::Handcrafted { .. } => {
                return Err(CliError::Usage("--encoder-out needs --extractor encoder".into()));
            }
        }
    }
    out.commit()?;
    Ok(0)
}

pub fn cmd_gradcheck(seed: u64, out: &mut dyn Write) -> Result<i32> {
    let mut failed = 0;
    writeln!(out, "op,max_rel_error,tolerance,status").map_err(|e| CliError::io("<stdout>", e))?;
    for check in registry() {
        let (err, ok) = match (check.run)(seed) {
            Ok(e) => (format!("{e:.3e}"), e <= check.tolerance),
            Err(e) => (format!("error: {e}"), false),
        };
        if !ok {
            failed += 1;
        }
        let status = if ok { "PASS" } else { "FAIL" };
        writeln!(out, "{},{},{:.0e},{status}", check.name, err, check.tolerance)
            .map_err(|e| CliError::io("<stdout>", e))?;
    }
    Ok(if failed == 0 { 0 } else { 1 })
}

pub struct BenchArgs {
    pub sizes: Vec<usize>,
    pub channels: usize,
    pub kind: PairKind,
    pub cap_mib: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn cmd_bench(cfg: &RunConfig, args: &BenchArgs, stdout: &mut dyn Write) -> Result<i32> {
    let mut mc = cfg.match_config();
    if let Some(cap) = args.cap_mib {
        mc.exhaustive_cap = cap << 20;
    }
    let refiners = match &cfg.refiner {
        Some(p) => Some(load_refiners(p)?),
        None => None,
    };
    let mut csv = format!("{BENCH_CSV_HEADER}\n");
    for &size in &args.sizes {
        let row = run_bench(
            &BenchConfig {
                size,
                channels: args.channels,
                kind: args.kind,
                match_config: mc,
                seed: cfg.seed,
            },
            refiners.as_deref(),
        )?;
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    match &args.out {
        Some(path) => {
            let mut out = Outputs::default();
            out.add(path, csv.into_bytes());
            out.commit()?;
        }
        None => stdout.write_all(csv.as_bytes()).map_err(|e| CliError::io("<stdout>", e))?,
    }
    Ok(0)
}
