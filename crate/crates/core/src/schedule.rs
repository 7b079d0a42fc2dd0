//! Linear-β noise schedule, DDIM timestep ladders, forward diffusion and x₀ prediction.

use crate::error::{Error, Result};
use crate::spectral::FeatureMap;

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Immutable noise schedule over timesteps `1..=n_train`.
///
/// `alpha_bar(0)` is the empty product, 1, so a trajectory can end at the
/// clean latent without special cases.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl Schedule {
    pub fn new(n_train: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if n_train == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "betas must satisfy 0 < start <= end < 1, got start={beta_start} end={beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..n_train)
            .map(|i| {
                if n_train == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (n_train - 1) as f64
                }
            })
            .collect();
        let mut alphas_cumprod = Vec::with_capacity(n_train + 1);
        alphas_cumprod.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_cumprod.push(acc);
        }
        Ok(Self {
            betas,
            alphas_cumprod,
        })
    }

    pub fn n_train(&self) -> usize {
        self.betas.len()
    }

    /// β_t for `t` in `1..=n_train`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// ᾱ_t for `t` in `0..=n_train`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    pub(crate) fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.n_train() {
            return Err(Error::invalid(format!(
                "timestep {t} outside schedule of length {}",
                self.n_train()
            )));
        }
        Ok(())
    }

    /// Uniform-stride ladder `⌊i·n_train/steps⌋` for `i = 1..=steps`.
    pub fn subsample(&self, steps: usize) -> Result<Vec<usize>> {
        let n = self.n_train();
        if steps == 0 || steps > n {
            return Err(Error::InvalidConfig(format!(
                "step count {steps} must be in 1..={n}"
            )));
        }
        Ok((1..=steps).map(|i| i * n / steps).collect())
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::new(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

pub fn build_schedule(n_train: usize, beta_start: f64, beta_end: f64) -> Result<Schedule> {
    Schedule::new(n_train, beta_start, beta_end)
}

pub fn subsample(s: &Schedule, steps: usize) -> Result<Vec<usize>> {
    s.subsample(steps)
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn forward_diffuse(x0: &FeatureMap, t: usize, eps: &FeatureMap, s: &Schedule) -> Result<FeatureMap> {
    s.check_timestep(t)?;
    let ab = s.alpha_bar(t);
    x0.affine_combine(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// `(z_t − √(1−ᾱ_t)·eps_hat) / √ᾱ_t`.
pub fn predict_x0(z_t: &FeatureMap, t: usize, eps_hat: &FeatureMap, s: &Schedule) -> Result<FeatureMap> {
    s.check_timestep(t)?;
    predict_x0_with(z_t, s.alpha_bar(t), eps_hat).map_err(|e| match e {
        Error::SingularSchedule { .. } => Error::SingularSchedule { t },
        other => other,
    })
}

/// [`forward_diffuse`] on raw `f64` buffers.
pub fn forward_diffuse_f64(x0: &[f64], t: usize, eps: &[f64], s: &Schedule) -> Result<Vec<f64>> {
    s.check_timestep(t)?;
    same_len(x0, eps)?;
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// [`predict_x0`] on raw `f64` buffers.
pub fn predict_x0_f64(z_t: &[f64], t: usize, eps_hat: &[f64], s: &Schedule) -> Result<Vec<f64>> {
    s.check_timestep(t)?;
    same_len(z_t, eps_hat)?;
    let ab = s.alpha_bar(t);
    if ab <= 0.0 {
        return Err(Error::SingularSchedule { t });
    }
    let (root, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z_t.iter().zip(eps_hat).map(|(z, e)| (z - noise * e) / root).collect())
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

pub(crate) fn predict_x0_with(z_t: &FeatureMap, alpha_bar: f64, eps_hat: &FeatureMap) -> Result<FeatureMap> {
    if alpha_bar <= 0.0 {
        return Err(Error::SingularSchedule { t: 0 });
    }
    let root = alpha_bar.sqrt();
    z_t.affine_combine(1.0 / root, eps_hat, -(1.0 - alpha_bar).sqrt() / root)
}
