//! `fbsdiff` command-line surface: `translate`, `bands`, `mask`, `invert`.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::codec::{CodecSpec, ImageBuffer};
use crate::config::{self, Mode, Overrides};
use crate::denoiser::DenoiserSpec;
use crate::error::{Error, Result};
use crate::masks::{BandKind, BandMask};
use crate::pipeline::{self, Pipeline};
use crate::schedule::Schedule;
use crate::spectral::{self, FeatureMap, Shape};
use crate::wire::remote_timeout;

#[derive(Debug, Parser)]
#[command(name = "fbsdiff", version, about = "Frequency band substitution for text-driven image translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Translate a reference image under a text prompt.
    Translate(TranslateArgs),
    /// Split an image into low/mid/high band reconstructions with an energy report.
    Bands(BandsArgs),
    /// Export a band mask as a binary PGM.
    Mask(MaskArgs),
    /// Invert a reference image and dump the noise latent.
    Invert(InvertArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigFlags {
    /// `key = value` file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long = "th-lp", allow_negative_numbers = true)]
    pub th_lp: Option<i64>,
    #[arg(long = "th-hp", allow_negative_numbers = true)]
    pub th_hp: Option<i64>,
    #[arg(long = "th-mp1", allow_negative_numbers = true)]
    pub th_mp1: Option<i64>,
    #[arg(long = "th-mp2", allow_negative_numbers = true)]
    pub th_mp2: Option<i64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long = "t-inv")]
    pub t_inv: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// oracle[:SIGMA] or remote:HOST:PORT
    #[arg(long)]
    pub denoiser: Option<DenoiserSpec>,
    /// identity, avgpool:K or remote:HOST:PORT
    #[arg(long)]
    pub codec: Option<CodecSpec>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

impl ConfigFlags {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            reference: self.reference.clone(),
            prompt: self.prompt.clone(),
            mode: self.mode,
            th_lp: self.th_lp,
            th_hp: self.th_hp,
            th_mp1: self.th_mp1,
            th_mp2: self.th_mp2,
            lambda: self.lambda,
            omega: self.omega,
            t_inv: self.t_inv,
            steps: self.steps,
            seed: self.seed,
            denoiser: self.denoiser.clone(),
            codec: self.codec.clone(),
            out: self.out.clone(),
            manifest: self.manifest.clone(),
        }
    }

    /// Flags layered over the config file, not yet resolved against defaults.
    pub fn layered(&self) -> Result<Overrides> {
        let file = match &self.config {
            Some(p) => Overrides::from_file(p)?,
            None => Overrides::default(),
        };
        Ok(self.overrides().layered_over(file))
    }

    pub fn resolve(&self) -> Result<config::RunConfig> {
        config::parse_config(self.overrides(), self.config.as_deref())
    }
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[command(flatten)]
    pub flags: ConfigFlags,
    /// Substitute only once, at the last calibration step (ablation; degraded output).
    #[arg(long, hide = true)]
    pub once_substitution: bool,
}

#[derive(Debug, Args)]
pub struct BandsArgs {
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[command(flatten)]
    pub flags: ConfigFlags,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[command(flatten)]
    pub flags: ConfigFlags,
}

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Runtime(e) => {
                write!(f, "{e}")?;
                let mut source = std::error::Error::source(e);
                while let Some(s) = source {
                    write!(f, "\n  caused by: {s}")?;
                    source = s.source();
                }
                Ok(())
            }
        }
    }
}

fn usage(e: Error) -> CliError {
    match e {
        Error::InvalidConfig(_) | Error::InvalidThreshold { .. } => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other),
    }
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing required --{flag}")))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Translate(args) => cmd_translate(&args),
        Command::Bands(args) => cmd_bands_entry(&args),
        Command::Mask(args) => cmd_mask(&args),
        Command::Invert(args) => cmd_invert(&args),
    }
}

fn cmd_translate(args: &TranslateArgs) -> Result<(), CliError> {
    let mut cfg = args.flags.resolve().map_err(usage)?;
    cfg.pipeline.once_substitution = args.once_substitution;
    let reference = require(&cfg.reference, "ref")?;
    let out = require(&cfg.out, "out")?;
    if cfg.pipeline.prompt.is_empty() {
        log::warn!("empty prompt; sampling is guided by the empty text");
    }
    let img = ImageBuffer::read_png(reference).map_err(CliError::Runtime)?;
    let mut p = Pipeline::from_config(Schedule::default(), cfg.pipeline.clone(), remote_timeout())
        .map_err(CliError::Runtime)?;
    let result = p.run(&img).map_err(CliError::Runtime)?;
    result.image.write_png(out).map_err(CliError::Runtime)?;
    if let Some(manifest) = &cfg.manifest {
        let mut text = p.manifest(&result.record);
        let _ = writeln!(text, "ref = {}", reference.display());
        let _ = writeln!(text, "out = {}", out.display());
        fs::write(manifest, text).map_err(|e| CliError::Runtime(e.into()))?;
    }
    log::info!("wrote {}", out.display());
    Ok(())
}

/// Per-band energies of a latent's DCT spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct BandReport {
    pub total: f64,
    pub low: f64,
    pub mid: f64,
    pub high: f64,
}

impl BandReport {
    pub fn fraction(&self, energy: f64) -> f64 {
        if self.total > 0.0 {
            energy / self.total
        } else {
            0.0
        }
    }

    pub fn to_text(&self, bands: &[BandKind; 3]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "total = {:.9e}", self.total);
        for (name, kind, e) in [
            ("low", bands[0], self.low),
            ("mid", bands[1], self.mid),
            ("high", bands[2], self.high),
        ] {
            let _ = writeln!(out, "{name} = {e:.9e} fraction = {:.6} band = {kind}", self.fraction(e));
        }
        out
    }
}

/// Band reconstructions (low, mid, high) of a latent plus their energies.
pub fn cmd_bands(z: &FeatureMap, bands: &[BandKind; 3]) -> Result<([FeatureMap; 3], BandReport)> {
    let s = z.shape();
    let spectrum = spectral::dct2_f64(s, &z.to_f64())?;
    let plane = s.plane();
    let total: f64 = spectrum.iter().map(|v| v * v).sum();
    let mut energies = [0.0; 3];
    let mut maps = Vec::with_capacity(3);
    for (b, kind) in bands.iter().enumerate() {
        let mask = BandMask::new(*kind, s.height, s.width)?;
        let mut masked = vec![0.0; s.len()];
        for c in 0..s.channels {
            for (k, &bit) in mask.bits().iter().enumerate() {
                if bit {
                    let v = spectrum[c * plane + k];
                    masked[c * plane + k] = v;
                    energies[b] += v * v;
                }
            }
        }
        maps.push(FeatureMap::from_f64(s, &spectral::idct2_f64(s, &masked)?)?);
    }
    let [low, mid, high]: [FeatureMap; 3] = maps.try_into().expect("three bands");
    Ok((
        [low, mid, high],
        BandReport {
            total,
            low: energies[0],
            mid: energies[1],
            high: energies[2],
        },
    ))
}

fn band_kinds(o: &Overrides) -> Result<[BandKind; 3]> {
    let mid = BandKind::Mid {
        lower: o.th_mp1.unwrap_or(config::DEFAULT_TH_MP1),
        upper: o.th_mp2.unwrap_or(config::DEFAULT_TH_MP2),
    };
    mid.validate()?;
    Ok([
        BandKind::Low {
            th: o.th_lp.unwrap_or(config::DEFAULT_TH_LP),
        },
        mid,
        BandKind::High {
            th: o.th_hp.unwrap_or(config::DEFAULT_TH_HP),
        },
    ])
}

fn cmd_bands_entry(args: &BandsArgs) -> Result<(), CliError> {
    let o = args.flags.layered().map_err(usage)?;
    let bands = band_kinds(&o).map_err(usage)?;
    let reference = require(&o.reference, "ref")?;
    let out_dir = require(&o.out, "out")?;
    let run = || -> Result<()> {
        let img = ImageBuffer::read_png(reference)?;
        let mut codec = o.codec.clone().unwrap_or_default().build(remote_timeout())?;
        let z = codec.encode(&img)?;
        let (maps, report) = cmd_bands(&z, &bands)?;
        fs::create_dir_all(out_dir)?;
        for (name, map) in ["low", "mid", "high"].iter().zip(&maps) {
            codec.decode(map)?.write_png(out_dir.join(format!("{name}.png")))?;
        }
        let text = report.to_text(&bands);
        fs::write(out_dir.join("energy.txt"), &text)?;
        print!("{text}");
        Ok(())
    };
    run().map_err(CliError::Runtime)
}

fn cmd_mask(args: &MaskArgs) -> Result<(), CliError> {
    let o = args.flags.layered().map_err(usage)?;
    let band = o.band().map_err(usage)?;
    let out = require(&o.out, "out")?;
    let mask = BandMask::new(band, args.height, args.width).map_err(usage)?;
    mask.write_pgm(out).map_err(CliError::Runtime)?;
    println!("{band} {}x{} popcount = {}", args.height, args.width, mask.popcount());
    Ok(())
}

/// Raw latent file: four little-endian `u32` (1, c, h, w) then `c·h·w` little-endian `f32`.
pub fn write_latent_file(path: &Path, z: &FeatureMap) -> Result<()> {
    let s = z.shape();
    let mut buf = Vec::with_capacity(16 + 4 * s.len());
    for d in [1, s.channels, s.height, s.width] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in z.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_latent_file(path: &Path) -> Result<FeatureMap> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 16 {
        return Err(Error::invalid("latent file shorter than its header"));
    }
    let dim = |i: usize| u32::from_le_bytes(buf[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    if dim(0) != 1 {
        return Err(Error::invalid(format!("latent file batch size {} is not 1", dim(0))));
    }
    let shape = Shape::new(dim(1), dim(2), dim(3));
    let body = &buf[16..];
    if body.len() != 4 * shape.len() {
        return Err(Error::invalid(format!(
            "latent file body has {} bytes, shape {shape} needs {}",
            body.len(),
            4 * shape.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    FeatureMap::new(shape, data)
}

fn cmd_invert(args: &InvertArgs) -> Result<(), CliError> {
    let cfg = args.flags.resolve().map_err(usage)?;
    let reference = require(&cfg.reference, "ref")?;
    let out = require(&cfg.out, "out")?;
    let run = || -> Result<()> {
        let img = ImageBuffer::read_png(reference)?;
        let timeout = remote_timeout();
        let mut codec = cfg.pipeline.codec.build(timeout)?;
        let mut denoiser = cfg.pipeline.denoiser.build(timeout)?;
        let z0 = codec.encode(&img).map_err(|e| e.in_stage("encode"))?;
        let schedule = Schedule::default();
        let zt = pipeline::invert(&z0, cfg.pipeline.t_inv, denoiser.as_mut(), &schedule)
            .map_err(|e| e.in_stage("inversion"))?;
        write_latent_file(out, &zt)
    };
    run().map_err(CliError::Runtime)
}
