//! Layered run configuration: command-line flags over a `key = value` file over defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::codec::CodecSpec;
use crate::denoiser::DenoiserSpec;
use crate::error::{Error, Result};
use crate::masks::BandKind;
use crate::pipeline::PipelineConfig;

pub const DEFAULT_TH_LP: i64 = 80;
pub const DEFAULT_TH_HP: i64 = 5;
pub const DEFAULT_TH_MP1: i64 = 5;
pub const DEFAULT_TH_MP2: i64 = 80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Low,
    Mid,
    High,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "low" => Ok(Mode::Low),
            "mid" => Ok(Mode::Mid),
            "high" => Ok(Mode::High),
            other => Err(Error::InvalidConfig(format!("unknown mode `{other}` (expected low, mid or high)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Low => "low",
            Mode::Mid => "mid",
            Mode::High => "high",
        })
    }
}

/// Every setting that can come from a flag or a config file; `None` means unset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub reference: Option<PathBuf>,
    pub prompt: Option<String>,
    pub mode: Option<Mode>,
    pub th_lp: Option<i64>,
    pub th_hp: Option<i64>,
    pub th_mp1: Option<i64>,
    pub th_mp2: Option<i64>,
    pub lambda: Option<f64>,
    pub omega: Option<f64>,
    pub t_inv: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub denoiser: Option<DenoiserSpec>,
    pub codec: Option<CodecSpec>,
    pub out: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("line {line}: bad value `{value}` for `{key}`")))
}

impl Overrides {
    /// Parses `key = value` lines; `#` starts a comment and keys mirror flag names.
    pub fn parse_file_contents(text: &str) -> Result<Self> {
        let mut o = Overrides::default();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {line}: expected `key = value`")))?;
            let key = key.trim().trim_start_matches("--").replace('_', "-");
            let value = value.trim();
            match key.as_str() {
                "ref" => o.reference = Some(PathBuf::from(value)),
                "prompt" => o.prompt = Some(value.to_string()),
                "mode" => o.mode = Some(parse_value(&key, value, line)?),
                "th-lp" => o.th_lp = Some(parse_value(&key, value, line)?),
                "th-hp" => o.th_hp = Some(parse_value(&key, value, line)?),
                "th-mp1" => o.th_mp1 = Some(parse_value(&key, value, line)?),
                "th-mp2" => o.th_mp2 = Some(parse_value(&key, value, line)?),
                "lambda" => o.lambda = Some(parse_value(&key, value, line)?),
                "omega" => o.omega = Some(parse_value(&key, value, line)?),
                "t-inv" => o.t_inv = Some(parse_value(&key, value, line)?),
                "steps" => o.steps = Some(parse_value(&key, value, line)?),
                "seed" => o.seed = Some(parse_value(&key, value, line)?),
                "denoiser" => o.denoiser = Some(value.parse()?),
                "codec" => o.codec = Some(value.parse()?),
                "out" => o.out = Some(PathBuf::from(value)),
                "manifest" => o.manifest = Some(PathBuf::from(value)),
                other => return Err(Error::InvalidConfig(format!("line {line}: unknown key `{other}`"))),
            }
        }
        Ok(o)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config file {}: {e}", path.display())))?;
        Self::parse_file_contents(&text)
    }

    /// Fills every unset field of `self` from `lower`.
    pub fn layered_over(self, lower: Overrides) -> Overrides {
        Overrides {
            reference: self.reference.or(lower.reference),
            prompt: self.prompt.or(lower.prompt),
            mode: self.mode.or(lower.mode),
            th_lp: self.th_lp.or(lower.th_lp),
            th_hp: self.th_hp.or(lower.th_hp),
            th_mp1: self.th_mp1.or(lower.th_mp1),
            th_mp2: self.th_mp2.or(lower.th_mp2),
            lambda: self.lambda.or(lower.lambda),
            omega: self.omega.or(lower.omega),
            t_inv: self.t_inv.or(lower.t_inv),
            steps: self.steps.or(lower.steps),
            seed: self.seed.or(lower.seed),
            denoiser: self.denoiser.or(lower.denoiser),
            codec: self.codec.or(lower.codec),
            out: self.out.or(lower.out),
            manifest: self.manifest.or(lower.manifest),
        }
    }

    pub fn band(&self) -> Result<BandKind> {
        let band = match self.mode.unwrap_or_default() {
            Mode::Low => BandKind::Low {
                th: self.th_lp.unwrap_or(DEFAULT_TH_LP),
            },
            Mode::High => BandKind::High {
                th: self.th_hp.unwrap_or(DEFAULT_TH_HP),
            },
            Mode::Mid => BandKind::Mid {
                lower: self.th_mp1.unwrap_or(DEFAULT_TH_MP1),
                upper: self.th_mp2.unwrap_or(DEFAULT_TH_MP2),
            },
        };
        band.validate()?;
        Ok(band)
    }
}

/// A resolved `translate` invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub mode: Mode,
    pub reference: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

/// Resolves flags, then the optional config file, then built-in defaults.
pub fn parse_config(flags: Overrides, file: Option<&Path>) -> Result<RunConfig> {
    let file = match file {
        Some(p) => Overrides::from_file(p)?,
        None => Overrides::default(),
    };
    resolve(flags.layered_over(file))
}

pub fn resolve(o: Overrides) -> Result<RunConfig> {
    let d = PipelineConfig::default();
    let pipeline = PipelineConfig {
        t_inv: o.t_inv.unwrap_or(d.t_inv),
        steps: o.steps.unwrap_or(d.steps),
        lambda: o.lambda.unwrap_or(d.lambda),
        omega: o.omega.unwrap_or(d.omega),
        band: o.band()?,
        prompt: o.prompt.clone().unwrap_or_default(),
        seed: o.seed.unwrap_or(d.seed),
        denoiser: o.denoiser.clone().unwrap_or(d.denoiser),
        codec: o.codec.clone().unwrap_or(d.codec),
        once_substitution: false,
        retain_trajectories: false,
    };
    pipeline.validate(&crate::schedule::Schedule::default())?;
    Ok(RunConfig {
        pipeline,
        mode: o.mode.unwrap_or_default(),
        reference: o.reference,
        out: o.out,
        manifest: o.manifest,
    })
}
