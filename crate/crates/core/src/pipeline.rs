//! Inversion, reconstruction and FBS-calibrated sampling trajectories.
//!
//! Trajectory indices run over a uniform-stride ladder `τ_1 < … < τ_T` of the
//! shared schedule, with `τ_0 = 0` (ᾱ = 1). Step `k` of a reverse trajectory
//! moves a latent from `τ_k` to `τ_{k−1}`; the calibration phase covers
//! `k = T … n_free + 1`, where `n_free` is `λ·T` rounded half to even.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{CodecSpec, ImageBuffer, LatentCodec};
use crate::denoiser::{cfg_eps, Conditioning, DenoiserSpec, NoisePredictor};
use crate::error::{Error, Result};
use crate::fbs::substitute_band;
use crate::masks::{BandKind, BandMask};
use crate::schedule::Schedule;
use crate::spectral::{FeatureMap, Shape};

/// Identifies the generator behind the initial sampling noise.
pub const PRNG_ID: &str = "chacha20(rand_chacha-0.9,seed_from_u64)+standard-normal-ziggurat(rand_distr-0.5,f64)";

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub t_inv: usize,
    pub steps: usize,
    /// Fraction of the sampling trajectory run without substitution.
    pub lambda: f64,
    pub omega: f64,
    pub band: BandKind,
    pub prompt: String,
    pub seed: u64,
    pub denoiser: DenoiserSpec,
    pub codec: CodecSpec,
    /// Debug only: substitute once at the last calibration step instead of every step.
    pub once_substitution: bool,
    /// Keep every calibration-step latent in the [`TrajectoryRecord`].
    pub retain_trajectories: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            t_inv: 1000,
            steps: 50,
            lambda: 0.45,
            omega: 7.5,
            band: BandKind::Low { th: 80 },
            prompt: String::new(),
            seed: 0,
            denoiser: DenoiserSpec::default(),
            codec: CodecSpec::default(),
            once_substitution: false,
            retain_trajectories: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, schedule: &Schedule) -> Result<()> {
        let n = schedule.n_train();
        if !(1 <= self.steps && self.steps <= self.t_inv && self.t_inv <= n) {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= steps ({}) <= t_inv ({}) <= schedule length ({n})",
                self.steps, self.t_inv
            )));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!("lambda {} must lie in [0, 1)", self.lambda)));
        }
        if !self.omega.is_finite() {
            return Err(Error::InvalidConfig("omega must be finite".into()));
        }
        self.band.validate()?;
        non_calibration_steps(self.steps, self.lambda)?;
        Ok(())
    }

    pub fn conditioning(&self) -> Conditioning {
        Conditioning::Text(self.prompt.clone())
    }
}

/// `λ·T` rounded half to even; must be a valid index in `[0, T)`.
pub fn non_calibration_steps(steps: usize, lambda: f64) -> Result<usize> {
    let n = (lambda * steps as f64).round_ties_even();
    if !(n >= 0.0 && n < steps as f64) {
        return Err(Error::InvalidConfig(format!(
            "lambda {lambda} x {steps} steps rounds to {n}, outside [0, {steps})"
        )));
    }
    Ok(n as usize)
}

/// One DDIM transition from `t_from` to `t_to` for a given noise estimate:
/// `√ᾱ_to·x̂0 + √(1−ᾱ_to)·ε̂` with `x̂0 = (z − √(1−ᾱ_from)·ε̂)/√ᾱ_from`.
pub fn ddim_transition(
    z: &FeatureMap,
    eps: &FeatureMap,
    t_from: usize,
    t_to: usize,
    schedule: &Schedule,
) -> Result<FeatureMap> {
    z.ensure_same_shape(eps)?;
    schedule.check_timestep(t_from)?;
    schedule.check_timestep(t_to)?;
    let (a_from, a_to) = (schedule.alpha_bar(t_from), schedule.alpha_bar(t_to));
    if a_from <= 0.0 {
        return Err(Error::SingularSchedule { t: t_from });
    }
    let (r_from, r_to) = (a_from.sqrt(), a_to.sqrt());
    // z_to = c_z·z + c_e·ε̂
    let c_z = r_to / r_from;
    let c_e = (1.0 - a_to).sqrt() - r_to * (1.0 - a_from).sqrt() / r_from;
    z.affine_combine(c_z, eps, c_e)
}

/// Reverse DDIM step from `t_cur` down to `t_prev`.
///
/// With text conditioning the noise estimate is the guided combination of
/// conditional and null predictions; with null conditioning ω is unused.
pub fn ddim_step(
    z_t: &FeatureMap,
    t_cur: usize,
    t_prev: usize,
    cond: &Conditioning,
    omega: f64,
    denoiser: &mut dyn NoisePredictor,
    schedule: &Schedule,
) -> Result<FeatureMap> {
    if t_prev >= t_cur {
        return Err(Error::invalid(format!(
            "reverse step needs t_prev < t_cur, got {t_prev} >= {t_cur}"
        )));
    }
    let uncond = denoiser.predict_eps(z_t, t_cur, &Conditioning::Null, schedule)?;
    let eps = match cond {
        Conditioning::Null => uncond,
        Conditioning::Text(_) => {
            let c = denoiser.predict_eps(z_t, t_cur, cond, schedule)?;
            cfg_eps(&c, &uncond, omega)?
        }
    };
    ddim_transition(z_t, &eps, t_cur, t_prev, schedule)
}

/// Null-conditioned DDIM inversion over a `t_inv`-step ladder; returns `z_{T_inv}`.
pub fn invert(
    z0: &FeatureMap,
    t_inv: usize,
    denoiser: &mut dyn NoisePredictor,
    schedule: &Schedule,
) -> Result<FeatureMap> {
    let ladder = schedule.subsample(t_inv)?;
    let mut z = z0.clone();
    let mut t = 0;
    for &next in &ladder {
        let eps = denoiser.predict_eps(&z, t, &Conditioning::Null, schedule)?;
        z = ddim_transition(&z, &eps, t, next, schedule)?;
        t = next;
    }
    Ok(z)
}

/// Null-conditioned DDIM sampling from `z_T` over a `steps`-step ladder; returns `ẑ_0`.
pub fn reconstruct(
    z_t: &FeatureMap,
    steps: usize,
    denoiser: &mut dyn NoisePredictor,
    schedule: &Schedule,
) -> Result<FeatureMap> {
    let ladder = with_origin(schedule.subsample(steps)?);
    let mut z = z_t.clone();
    for k in (1..ladder.len()).rev() {
        z = ddim_step(&z, ladder[k], ladder[k - 1], &Conditioning::Null, 1.0, denoiser, schedule)?;
    }
    Ok(z)
}

fn with_origin(ladder: Vec<usize>) -> Vec<usize> {
    let mut full = Vec::with_capacity(ladder.len() + 1);
    full.push(0);
    full.extend(ladder);
    full
}

/// Draws `z̃_T ~ N(0, I)` from the seeded generator named by [`PRNG_ID`].
pub fn initial_noise(shape: Shape, seed: u64) -> FeatureMap {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..shape.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    FeatureMap::from_f64(shape, &data).expect("normal samples are finite")
}

/// Latents after one calibration step, post-substitution.
#[derive(Debug, Clone)]
pub struct CalibrationStep {
    /// Trajectory index `k − 1` the latents now sit at.
    pub index: usize,
    pub timestep: usize,
    pub reconstruction: FeatureMap,
    pub sampling: FeatureMap,
}

#[derive(Debug, Clone, Default)]
pub struct StageTimings {
    pub encode: Duration,
    pub inversion: Duration,
    pub calibration: Duration,
    pub free_sampling: Duration,
    pub decode: Duration,
}

#[derive(Debug, Clone, Default)]
pub struct TrajectoryRecord {
    pub inverted: Option<FeatureMap>,
    /// Empty unless the config asked for retention.
    pub calibration: Vec<CalibrationStep>,
    /// Reconstruction and sampling latents at index `n_free`, always kept.
    pub handoff: Option<(FeatureMap, FeatureMap)>,
    pub timings: StageTimings,
}

#[derive(Debug, Clone)]
pub struct LatentRun {
    pub latent: FeatureMap,
    pub record: TrajectoryRecord,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub image: ImageBuffer,
    pub latent: FeatureMap,
    pub record: TrajectoryRecord,
}

/// A configured translation run bound to concrete backends.
pub struct Pipeline {
    schedule: Schedule,
    config: PipelineConfig,
    denoiser: Box<dyn NoisePredictor>,
    codec: Box<dyn LatentCodec>,
}

impl Pipeline {
    pub fn new(
        schedule: Schedule,
        config: PipelineConfig,
        denoiser: Box<dyn NoisePredictor>,
        codec: Box<dyn LatentCodec>,
    ) -> Result<Self> {
        config.validate(&schedule)?;
        Ok(Self {
            schedule,
            config,
            denoiser,
            codec,
        })
    }

    /// Builds the backends named in `config`, connecting to remote ones.
    pub fn from_config(schedule: Schedule, config: PipelineConfig, timeout: Duration) -> Result<Self> {
        config.validate(&schedule)?;
        let denoiser = config.denoiser.build(timeout).map_err(|e| e.in_stage("denoiser setup"))?;
        let codec = config.codec.build(timeout).map_err(|e| e.in_stage("codec setup"))?;
        Self::new(schedule, config, denoiser, codec)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn run(&mut self, reference: &ImageBuffer) -> Result<RunOutput> {
        let start = Instant::now();
        let z0 = self.codec.encode(reference).map_err(|e| e.in_stage("encode"))?;
        let encode_time = start.elapsed();

        let LatentRun { latent, mut record } = self.run_latent(&z0)?;
        record.timings.encode = encode_time;

        let start = Instant::now();
        let image = self.codec.decode(&latent).map_err(|e| e.in_stage("decode"))?;
        record.timings.decode = start.elapsed();
        Ok(RunOutput {
            image,
            latent,
            record,
        })
    }

    /// Runs everything between encode and decode on a latent `z0`.
    pub fn run_latent(&mut self, z0: &FeatureMap) -> Result<LatentRun> {
        let cfg = &self.config;
        let schedule = &self.schedule;
        let denoiser = self.denoiser.as_mut();
        let mut record = TrajectoryRecord::default();

        let start = Instant::now();
        let inverted = invert(z0, cfg.t_inv, denoiser, schedule).map_err(|e| e.in_stage("inversion"))?;
        record.timings.inversion = start.elapsed();

        let shape = z0.shape();
        let mask = BandMask::new(cfg.band, shape.height, shape.width)?;
        let ladder = with_origin(schedule.subsample(cfg.steps)?);
        let n_free = non_calibration_steps(cfg.steps, cfg.lambda)?;
        let text = cfg.conditioning();

        let mut recon = inverted.clone();
        let mut sample = initial_noise(shape, cfg.seed);
        if cfg.retain_trajectories {
            record.inverted = Some(inverted);
        }

        let start = Instant::now();
        for k in (n_free + 1..=cfg.steps).rev() {
            let (t_cur, t_prev) = (ladder[k], ladder[k - 1]);
            let step = |stage: &'static str| move |e: Error| e.in_stage(stage);
            recon = ddim_step(&recon, t_cur, t_prev, &Conditioning::Null, 1.0, denoiser, schedule)
                .map_err(step("reconstruction"))?;
            sample = ddim_step(&sample, t_cur, t_prev, &text, cfg.omega, denoiser, schedule)
                .map_err(step("sampling"))?;
            let substitute = !cfg.once_substitution || k - 1 == n_free;
            if substitute {
                sample = substitute_band(&recon, &sample, &mask).map_err(step("substitution"))?;
            }
            if cfg.retain_trajectories {
                record.calibration.push(CalibrationStep {
                    index: k - 1,
                    timestep: t_prev,
                    reconstruction: recon.clone(),
                    sampling: sample.clone(),
                });
            }
        }
        record.timings.calibration = start.elapsed();
        record.handoff = Some((recon, sample.clone()));

        let start = Instant::now();
        for k in (1..=n_free).rev() {
            sample = ddim_step(&sample, ladder[k], ladder[k - 1], &text, cfg.omega, denoiser, schedule)
                .map_err(|e| e.in_stage("sampling"))?;
        }
        record.timings.free_sampling = start.elapsed();

        Ok(LatentRun {
            latent: sample,
            record,
        })
    }

    /// Text of the run manifest: config echo, backends, PRNG and stage timings.
    pub fn manifest(&self, record: &TrajectoryRecord) -> String {
        let cfg = &self.config;
        let t = &record.timings;
        let n_free = non_calibration_steps(cfg.steps, cfg.lambda).unwrap_or(0);
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("band", cfg.band.to_string());
        kv("t-inv", cfg.t_inv.to_string());
        kv("steps", cfg.steps.to_string());
        kv("lambda", cfg.lambda.to_string());
        kv("calibration-steps", (cfg.steps - n_free).to_string());
        kv("non-calibration-steps", n_free.to_string());
        kv("omega", cfg.omega.to_string());
        kv("prompt", format!("{:?}", cfg.prompt));
        kv("seed", cfg.seed.to_string());
        kv("prng", PRNG_ID.to_string());
        kv("denoiser", self.denoiser.describe());
        kv("codec", self.codec.describe());
        kv("schedule", format!("linear-beta n_train={}", self.schedule.n_train()));
        if cfg.once_substitution {
            kv("once-substitution", "true".into());
        }
        kv("time-encode-ms", ms(t.encode));
        kv("time-inversion-ms", ms(t.inversion));
        kv("time-calibration-ms", ms(t.calibration));
        kv("time-free-sampling-ms", ms(t.free_sampling));
        kv("time-decode-ms", ms(t.decode));
        out
    }
}

fn ms(d: Duration) -> String {
    format!("{:.3}", d.as_secs_f64() * 1e3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::IdentityCodec;
    use crate::denoiser::OracleDenoiser;

    /// Always predicts zero noise.
    struct ZeroDenoiser;

    impl NoisePredictor for ZeroDenoiser {
        fn predict_eps(&mut self, z: &FeatureMap, _: usize, _: &Conditioning, _: &Schedule) -> Result<FeatureMap> {
            Ok(FeatureMap::zeros(z.shape()))
        }

        fn describe(&self) -> String {
            "zero".into()
        }
    }

    /// Conditional and null predictions differ by a constant offset.
    struct OffsetDenoiser;

    impl NoisePredictor for OffsetDenoiser {
        fn predict_eps(&mut self, z: &FeatureMap, _: usize, c: &Conditioning, _: &Schedule) -> Result<FeatureMap> {
            Ok(match c {
                Conditioning::Null => z.scale(0.1),
                Conditioning::Text(_) => z.scale(0.3),
            })
        }

        fn describe(&self) -> String {
            "offset".into()
        }
    }

    fn ramp(shape: Shape) -> FeatureMap {
        let data = (0..shape.len()).map(|k| ((k as f32) * 0.61).cos()).collect();
        FeatureMap::new(shape, data).unwrap()
    }

    #[test]
    fn rounding_of_lambda() {
        assert_eq!(non_calibration_steps(50, 0.45).unwrap(), 22);
        assert_eq!(non_calibration_steps(50, 0.0).unwrap(), 0);
        assert_eq!(non_calibration_steps(10, 0.25).unwrap(), 2);
        assert!(non_calibration_steps(50, 0.99).is_err());
    }

    #[test]
    fn zero_noise_inversion_telescopes() {
        let s = Schedule::default();
        let z0 = ramp(Shape::new(2, 3, 3));
        let out = invert(&z0, 100, &mut ZeroDenoiser, &s).unwrap();
        let expected = z0.scale(s.alpha_bar(1000).sqrt());
        assert!(out.max_abs_diff(&expected) <= 1e-6);
    }

    #[test]
    fn zero_latent_stays_zero() {
        let s = Schedule::default();
        let mut d = OracleDenoiser::new(1.0).unwrap();
        let z0 = FeatureMap::zeros(Shape::new(1, 4, 4));
        assert!(invert(&z0, 50, &mut d, &s).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_with_zero_noise_rescales() {
        let s = Schedule::default();
        let z = ramp(Shape::new(1, 2, 5));
        let out = ddim_step(&z, 600, 580, &Conditioning::Null, 1.0, &mut ZeroDenoiser, &s).unwrap();
        let expected = z.scale((s.alpha_bar(580) / s.alpha_bar(600)).sqrt());
        assert!(out.max_abs_diff(&expected) <= 1e-6);
    }

    #[test]
    fn final_step_returns_x0_prediction() {
        let s = Schedule::default();
        let z = ramp(Shape::new(1, 3, 3));
        let mut d = OracleDenoiser::new(0.7).unwrap();
        let out = ddim_step(&z, 20, 0, &Conditioning::Null, 1.0, &mut d, &s).unwrap();
        let eps = d.predict_eps(&z, 20, &Conditioning::Null, &s).unwrap();
        let x0 = crate::schedule::predict_x0(&z, 20, &eps, &s).unwrap();
        assert!(out.max_abs_diff(&x0) <= 1e-6);
    }

    #[test]
    fn omega_one_with_equal_predictions_matches_null_step() {
        let s = Schedule::default();
        let z = ramp(Shape::new(1, 3, 3));
        let mut d = OracleDenoiser::new(1.0).unwrap();
        let text = Conditioning::Text("x".into());
        let a = ddim_step(&z, 400, 380, &text, 1.0, &mut d, &s).unwrap();
        let b = ddim_step(&z, 400, 380, &Conditioning::Null, 1.0, &mut d, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn guided_step_uses_cfg_combination() {
        let s = Schedule::default();
        let z = ramp(Shape::new(1, 2, 2));
        let text = Conditioning::Text("x".into());
        let out = ddim_step(&z, 400, 380, &text, 7.5, &mut OffsetDenoiser, &s).unwrap();
        let eps = z.scale(0.1 + 7.5 * 0.2);
        let expected = ddim_transition(&z, &eps, 400, 380, &s).unwrap();
        assert!(out.max_abs_diff(&expected) <= 1e-5);
    }

    #[test]
    fn step_rejects_wrong_order() {
        let s = Schedule::default();
        let z = ramp(Shape::new(1, 2, 2));
        assert!(ddim_step(&z, 20, 20, &Conditioning::Null, 1.0, &mut ZeroDenoiser, &s).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let s = Shape::new(4, 8, 8);
        assert_eq!(initial_noise(s, 7), initial_noise(s, 7));
        assert_ne!(initial_noise(s, 7), initial_noise(s, 8));
        let n = initial_noise(Shape::new(1, 128, 128), 1);
        let mean = n.data().iter().map(|&v| v as f64).sum::<f64>() / n.data().len() as f64;
        let var = n.norm_sq() / n.data().len() as f64 - mean * mean;
        assert!(mean.abs() < 0.03 && (var - 1.0).abs() < 0.05, "{mean} {var}");
    }

    #[test]
    fn config_validation() {
        let s = Schedule::default();
        let ok = PipelineConfig::default();
        ok.validate(&s).unwrap();
        for bad in [
            PipelineConfig { steps: 0, ..ok.clone() },
            PipelineConfig { steps: 60, t_inv: 50, ..ok.clone() },
            PipelineConfig { t_inv: 2000, ..ok.clone() },
            PipelineConfig { lambda: 1.0, ..ok.clone() },
            PipelineConfig { lambda: -0.1, ..ok.clone() },
            PipelineConfig { band: BandKind::Mid { lower: 80, upper: 5 }, ..ok.clone() },
        ] {
            assert!(bad.validate(&s).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn records_calibration_steps_in_order() {
        let cfg = PipelineConfig {
            t_inv: 20,
            steps: 10,
            lambda: 0.3,
            retain_trajectories: true,
            prompt: "p".into(),
            ..PipelineConfig::default()
        };
        let mut p = Pipeline::new(
            Schedule::default(),
            cfg,
            Box::new(OracleDenoiser::new(1.0).unwrap()),
            Box::new(IdentityCodec),
        )
        .unwrap();
        let run = p.run_latent(&ramp(Shape::new(3, 8, 8))).unwrap();
        let idx: Vec<_> = run.record.calibration.iter().map(|c| c.index).collect();
        assert_eq!(idx, vec![9, 8, 7, 6, 5, 4, 3]);
        assert_eq!(run.record.calibration[0].timestep, 900);
        let (r, s) = run.record.handoff.unwrap();
        assert_eq!(r, run.record.calibration.last().unwrap().reconstruction);
        assert_eq!(s, run.record.calibration.last().unwrap().sampling);
    }

    #[test]
    fn stage_errors_are_tagged() {
        struct Failing;
        impl NoisePredictor for Failing {
            fn predict_eps(&mut self, _: &FeatureMap, _: usize, _: &Conditioning, _: &Schedule) -> Result<FeatureMap> {
                Err(Error::Backend("down".into()))
            }
            fn describe(&self) -> String {
                "failing".into()
            }
        }
        let cfg = PipelineConfig { t_inv: 10, steps: 5, ..PipelineConfig::default() };
        let mut p = Pipeline::new(Schedule::default(), cfg, Box::new(Failing), Box::new(IdentityCodec)).unwrap();
        let err = p.run(&ImageBuffer::filled(4, 4, [10, 20, 30])).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "inversion", .. }), "{err}");
        assert!(err.to_string().contains("down"));
    }
}
