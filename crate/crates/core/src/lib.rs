//! Text-driven image-to-image translation by dynamic DCT frequency band
//! substitution between DDIM trajectories.
//!
//! A reference latent is inverted to noise, then reconstructed with null
//! conditioning while a text-guided sampling trajectory runs in lock-step.
//! During the calibration phase one DCT band of each sampling latent is
//! replaced by the matching band of the reconstruction latent; the remaining
//! steps sample freely.
//!
//! The noise predictor is pluggable: [`denoiser::OracleDenoiser`] is the
//! closed-form optimum for Gaussian data and makes every trajectory exactly
//! analyzable, and [`denoiser::RemoteDenoiser`] drives a real backbone over
//! the [`wire`] protocol.

pub mod cli;
pub mod codec;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod fbs;
pub mod masks;
pub mod pipeline;
pub mod schedule;
pub mod spectral;
pub mod wire;

pub use codec::{CodecSpec, ImageBuffer, LatentCodec};
pub use denoiser::{cfg_eps, Conditioning, DenoiserSpec, NoisePredictor, OracleDenoiser};
pub use error::{Error, Result};
pub use fbs::substitute_band;
pub use masks::{make_mask, mask_popcount, BandKind, BandMask};
pub use pipeline::{ddim_step, invert, reconstruct, Pipeline, PipelineConfig};
pub use schedule::{build_schedule, forward_diffuse, predict_x0, Schedule};
pub use spectral::{dct2, idct2, FeatureMap, Shape, Spectrum};
