//! Noise predictors (ε_θ) and classifier-free guidance.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::schedule::Schedule;
use crate::spectral::FeatureMap;
use crate::wire::{RemoteClient, Request};

/// Text conditioning for a noise prediction; `Null` is the empty-prompt embedding.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Conditioning {
    #[default]
    Null,
    Text(String),
}

impl Conditioning {
    pub fn is_null(&self) -> bool {
        matches!(self, Conditioning::Null)
    }
}

pub trait NoisePredictor: Send {
    /// Predicts the noise in `z_t` at schedule index `t`.
    fn predict_eps(
        &mut self,
        z_t: &FeatureMap,
        t: usize,
        cond: &Conditioning,
        schedule: &Schedule,
    ) -> Result<FeatureMap>;

    fn describe(&self) -> String;
}

/// Posterior-mean noise predictor for data drawn from `N(0, σ²I)`.
///
/// For `z_t = √ᾱ x0 + √(1−ᾱ) ε` the optimal prediction is
/// `√(1−ᾱ)·z_t / (ᾱσ² + 1 − ᾱ)`, which makes every DDIM step a scalar map.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    sigma: f64,
    warned: bool,
}

impl OracleDenoiser {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidConfig(format!("oracle sigma must be positive, got {sigma}")));
        }
        Ok(Self { sigma, warned: false })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Gain `k` with `ε̂ = k·z_t` for a given ᾱ.
    pub fn gain(&self, alpha_bar: f64) -> f64 {
        (1.0 - alpha_bar).sqrt() / (alpha_bar * self.sigma * self.sigma + 1.0 - alpha_bar)
    }
}

impl NoisePredictor for OracleDenoiser {
    fn predict_eps(
        &mut self,
        z_t: &FeatureMap,
        t: usize,
        cond: &Conditioning,
        schedule: &Schedule,
    ) -> Result<FeatureMap> {
        schedule.check_timestep(t)?;
        if !cond.is_null() && !self.warned {
            log::warn!("oracle denoiser is unconditional; text conditioning is ignored");
            self.warned = true;
        }
        Ok(z_t.scale(self.gain(schedule.alpha_bar(t))))
    }

    fn describe(&self) -> String {
        format!("oracle:{}", self.sigma)
    }
}

/// ε_θ served over the wire protocol.
#[derive(Debug)]
pub struct RemoteDenoiser {
    client: RemoteClient,
}

impl RemoteDenoiser {
    pub fn connect(address: &str, timeout: Duration) -> Result<Self> {
        Ok(Self {
            client: RemoteClient::connect(address, timeout)?,
        })
    }
}

impl NoisePredictor for RemoteDenoiser {
    fn predict_eps(
        &mut self,
        z_t: &FeatureMap,
        t: usize,
        cond: &Conditioning,
        schedule: &Schedule,
    ) -> Result<FeatureMap> {
        schedule.check_timestep(t)?;
        let out = self
            .client
            .call(&Request::eps(t as u32, cond.clone(), z_t.clone()))?;
        if out.shape() != z_t.shape() {
            return Err(Error::Backend(format!(
                "{} returned eps of shape {} for input {}",
                self.client.address(),
                out.shape(),
                z_t.shape()
            )));
        }
        Ok(out)
    }

    fn describe(&self) -> String {
        format!("remote:{}", self.client.address())
    }
}

/// Which ε-predictor to build, as written on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum DenoiserSpec {
    Oracle { sigma: f64 },
    Remote { address: String },
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        DenoiserSpec::Oracle { sigma: 1.0 }
    }
}

impl DenoiserSpec {
    pub fn build(&self, timeout: Duration) -> Result<Box<dyn NoisePredictor>> {
        Ok(match self {
            DenoiserSpec::Oracle { sigma } => Box::new(OracleDenoiser::new(*sigma)?),
            DenoiserSpec::Remote { address } => Box::new(RemoteDenoiser::connect(address, timeout)?),
        })
    }
}

impl FromStr for DenoiserSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "oracle" {
            return Ok(DenoiserSpec::Oracle { sigma: 1.0 });
        }
        if let Some(sigma) = s.strip_prefix("oracle:") {
            let sigma: f64 = sigma
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad oracle sigma `{sigma}`")))?;
            OracleDenoiser::new(sigma)?;
            return Ok(DenoiserSpec::Oracle { sigma });
        }
        if let Some(address) = s.strip_prefix("remote:") {
            return parse_address(address).map(|address| DenoiserSpec::Remote { address });
        }
        Err(Error::InvalidConfig(format!(
            "unknown denoiser `{s}` (expected oracle[:SIGMA] or remote:HOST:PORT)"
        )))
    }
}

impl fmt::Display for DenoiserSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenoiserSpec::Oracle { sigma } => write!(f, "oracle:{sigma}"),
            DenoiserSpec::Remote { address } => write!(f, "remote:{address}"),
        }
    }
}

pub(crate) fn parse_address(address: &str) -> Result<String> {
    match address.rsplit_once(':') {
        Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => Ok(address.to_string()),
        _ => Err(Error::InvalidConfig(format!("bad remote address `{address}` (expected HOST:PORT)"))),
    }
}

pub fn predict_eps(
    denoiser: &mut dyn NoisePredictor,
    z_t: &FeatureMap,
    t: usize,
    cond: &Conditioning,
    schedule: &Schedule,
) -> Result<FeatureMap> {
    denoiser.predict_eps(z_t, t, cond, schedule)
}

/// Classifier-free guidance: `ω·cond + (1−ω)·uncond`, evaluated as
/// `uncond + ω·(cond − uncond)` in `f64`.
pub fn cfg_eps(eps_cond: &FeatureMap, eps_uncond: &FeatureMap, omega: f64) -> Result<FeatureMap> {
    eps_cond.ensure_same_shape(eps_uncond)?;
    let data = eps_cond
        .data()
        .iter()
        .zip(eps_uncond.data())
        .map(|(&c, &u)| {
            let (c, u) = (c as f64, u as f64);
            (u + omega * (c - u)) as f32
        })
        .collect();
    FeatureMap::new(eps_cond.shape(), data)
}
