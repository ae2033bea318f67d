//! Command-line front end for hierarchical GRU-assisted PatchMatch:
//! `match`, `warp`, `train`, `gradcheck` and `bench`.

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod fieldfile;
pub mod gradsuite;
pub mod imageio;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use hpmatch_core::matcher::RefineMode;
use hpmatch_core::Real;

use crate::bench::PairKind;
use crate::commands::{BenchArgs, TrainArgs};
use crate::config::{parse_mode, ExtractorKind, Overrides, RunConfig};
use crate::error::{CliError, Result};

#[derive(Parser, Debug)]
#[command(name = "hpmatch", version, about = "Dense correspondence with hierarchical GRU-assisted PatchMatch")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// Pyramid levels.
    #[arg(long, global = true)]
    pub levels: Option<usize>,
    /// Candidates kept per position.
    #[arg(long, global = true)]
    pub topk: Option<usize>,
    /// Propagation and refinement iterations per level.
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    /// Softmax temperature of the soft warp.
    #[arg(long, global = true)]
    pub tau: Option<Real>,
    /// Hidden width of the GRU refiner.
    #[arg(long, global = true)]
    pub hidden: Option<usize>,
    /// Width of each refiner input embedding.
    #[arg(long, global = true)]
    pub embed: Option<usize>,
    /// pure or greedy.
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<RefineMode>,
    /// encoder or handcrafted.
    #[arg(long, global = true)]
    pub extractor: Option<ExtractorKind>,
    /// Patch radius of the handcrafted descriptor.
    #[arg(long, global = true)]
    pub radius: Option<usize>,
    /// Encoder weight file.
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// Refiner weight file.
    #[arg(long, global = true)]
    pub refiner: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0: one per core). Affects speed only.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// key = value file; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            levels: self.levels,
            topk: self.topk,
            iters: self.iters,
            tau: self.tau,
            hidden: self.hidden,
            embed: self.embed,
            mode: self.mode,
            extractor: self.extractor,
            radius: self.radius,
            weights: self.weights.clone(),
            refiner: self.refiner.clone(),
            seed: self.seed,
            threads: self.threads,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Match a source image against an exemplar and write per-level fields,
    /// a flow visualization and the warped exemplar.
    Match {
        source: PathBuf,
        exemplar: PathBuf,
        /// Output directory.
        #[arg(long, short, default_value = ".")]
        out: PathBuf,
    },
    /// Soft-warp an exemplar through a field file.
    Warp {
        exemplar: PathBuf,
        field: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train the refiners on pseudo exemplars of the PNG images in a directory.
    Train {
        images: PathBuf,
        /// Refiner weight file to write.
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value = "loss.csv")]
        loss_csv: PathBuf,
        /// Also write the trained encoders.
        #[arg(long)]
        encoder_out: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: Real,
        #[arg(long, default_value_t = 1.0)]
        lambda_align: Real,
        /// Width of a freshly initialized encoder.
        #[arg(long, default_value_t = 16)]
        base_width: usize,
        /// Keep the displacement head fixed.
        #[arg(long)]
        freeze_head: bool,
        /// Leave the encoders untouched.
        #[arg(long)]
        refiner_only: bool,
    },
    /// Compare every hand-written backward pass with finite differences.
    Gradcheck,
    /// Time exhaustive against hierarchical matching on synthetic pairs.
    Bench {
        /// Comma-separated square sizes.
        #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        /// translation or affine.
        #[arg(long, default_value = "translation")]
        pairs: PairKind,
        /// Ceiling on the exhaustive similarity matrix, in MiB.
        #[arg(long)]
        cap_mib: Option<usize>,
        /// CSV file; stdout when absent.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

/// Refiner width used by `bench` unless given explicitly.
pub const BENCH_HIDDEN: usize = 8;
pub const BENCH_EMBED: usize = 4;

pub fn execute(cli: Cli) -> Result<i32> {
    let mut overrides = cli.common.overrides();
    if matches!(cli.command, Command::Bench { .. }) {
        overrides.hidden.get_or_insert(BENCH_HIDDEN);
        overrides.embed.get_or_insert(BENCH_EMBED);
    }
    let cfg = RunConfig::resolve(cli.common.config.as_deref(), &overrides)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Failed(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Match { source, exemplar, out } => commands::cmd_match(&cfg, &source, &exemplar, &out),
        Command::Warp { exemplar, field, out } => commands::cmd_warp(&cfg, &exemplar, &field, &out),
        Command::Train {
            images,
            out,
            loss_csv,
            encoder_out,
            steps,
            lr,
            lambda_align,
            base_width,
            freeze_head,
            refiner_only,
        } => commands::cmd_train(
            &cfg,
            &TrainArgs {
                images,
                out,
                loss_csv,
                encoder_out,
                steps,
                lr,
                lambda_align,
                base_width,
                freeze_head,
                refiner_only,
            },
        ),
        Command::Gradcheck => commands::cmd_gradcheck(cfg.seed, &mut std::io::stdout().lock()),
        Command::Bench {
            sizes,
            channels,
            pairs,
            cap_mib,
            out,
        } => commands::cmd_bench(
            &cfg,
            &BenchArgs {
                sizes,
                channels,
                kind: pairs,
                cap_mib,
                out,
            },
            &mut std::io::stdout().lock(),
        ),
    })
}

/// Parses `args` and runs the command, printing errors to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("hpmatch: {e}");
            1
        }
    }
}
