//! Run configuration: defaults, overridden by a `key = value` file,
//! overridden by command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use hpmatch_core::matcher::{MatchConfig, RefineMode};
use hpmatch_core::Real;

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractorKind {
    Encoder,
    Handcrafted,
}

impl FromStr for ExtractorKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "encoder" => Ok(ExtractorKind::Encoder),
            "handcrafted" => Ok(ExtractorKind::Handcrafted),
            _ => Err(format!("unknown extractor {s:?} (expected encoder or handcrafted)")),
        }
    }
}

pub fn parse_mode(s: &str) -> std::result::Result<RefineMode, String> {
    match s {
        "pure" => Ok(RefineMode::Pure),
        "greedy" => Ok(RefineMode::Greedy),
        _ => Err(format!("unknown mode {s:?} (expected pure or greedy)")),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub levels: usize,
    pub topk: usize,
    pub iters: usize,
    pub tau: Real,
    pub hidden: usize,
    pub embed: usize,
    pub mode: RefineMode,
    pub extractor: ExtractorKind,
    /// Patch radius of the handcrafted descriptor.
    pub radius: usize,
    /// Encoder weight file.
    pub weights: Option<PathBuf>,
    /// Refiner weight file.
    pub refiner: Option<PathBuf>,
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = MatchConfig::default();
        RunConfig {
            levels: m.levels,
            topk: m.k,
            iters: m.iters,
            tau: m.temperature,
            hidden: m.hidden,
            embed: m.embed,
            mode: m.mode,
            extractor: ExtractorKind::Handcrafted,
            radius: 1,
            weights: None,
            refiner: None,
            seed: 0,
            threads: 0,
        }
    }
}

/// Flag values; `None` leaves the file or default value in place.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub levels: Option<usize>,
    pub topk: Option<usize>,
    pub iters: Option<usize>,
    pub tau: Option<Real>,
    pub hidden: Option<usize>,
    pub embed: Option<usize>,
    pub mode: Option<RefineMode>,
    pub extractor: Option<ExtractorKind>,
    pub radius: Option<usize>,
    pub weights: Option<PathBuf>,
    pub refiner: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

impl RunConfig {
    /// Applies `key = value` lines. Blank lines and `#` comments are
    /// skipped; unknown keys are an error.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "levels" => self.levels = parse(key, value)?,
                "topk" => self.topk = parse(key, value)?,
                "iters" => self.iters = parse(key, value)?,
                "tau" => self.tau = parse(key, value)?,
                "hidden" => self.hidden = parse(key, value)?,
                "embed" => self.embed = parse(key, value)?,
                "mode" => self.mode = parse_mode(value).map_err(CliError::Config)?,
                "extractor" => self.extractor = parse(key, value)?,
                "radius" => self.radius = parse(key, value)?,
                "weights" => self.weights = Some(PathBuf::from(value)),
                "refiner" => self.refiner = Some(PathBuf::from(value)),
                "seed" => self.seed = parse(key, value)?,
                "threads" => self.threads = parse(key, value)?,
                _ => return Err(CliError::Config(format!("line {}: unknown key {key:?}", n + 1))),
            }
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn apply_overrides(&mut self, o: &Overrides) {
        macro_rules! take {
            ($($f:ident),*) => {$(if let Some(v) = &o.$f { self.$f = v.clone(); })*};
        }
        take!(levels, topk, iters, tau, hidden, embed, mode, extractor, radius, seed, threads);
        if o.weights.is_some() {
            self.weights = o.weights.clone();
        }
        if o.refiner.is_some() {
            self.refiner = o.refiner.clone();
        }
    }

    /// Defaults, then the optional file, then the flags; validated.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        cfg.apply_overrides(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            k: self.topk,
            levels: self.levels,
            iters: self.iters,
            temperature: self.tau,
            mode: self.mode,
            hidden: self.hidden,
            embed: self.embed,
            ..MatchConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.match_config().validate()?;
        if self.radius > 8 {
            return Err(CliError::Config(format!("radius {} exceeds 8", self.radius)));
        }
        Ok(())
    }

    /// Matching with the encoder extractor needs trained weights.
    pub fn require_weights(&self) -> Result<()> {
        if self.extractor == ExtractorKind::Encoder && self.weights.is_none() {
            return Err(CliError::Config("the encoder extractor needs a weight file (--weights)".into()));
        }
        Ok(())
    }
}
