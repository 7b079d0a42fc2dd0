//! Image <-> latent codecs standing in for an autoencoder's encoder and decoder.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use crate::denoiser::parse_address;
use crate::error::{Error, Result};
use crate::spectral::{FeatureMap, Shape};
use crate::wire::{RemoteClient, Request};

/// 8-bit RGB pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    pixels: Vec<[u8; 3]>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!("image {height}x{width} is empty")));
        }
        if pixels.len() != height * width {
            return Err(Error::invalid(format!(
                "image {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        Self {
            height,
            width,
            pixels: vec![rgb; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        self.pixels[row * self.width + col]
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img.pixels().map(|p| p.0).collect();
        Self::new(h as usize, w as usize, pixels)
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let raw: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::invalid("pixel buffer does not match image size"))?;
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

fn to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Inverse range map with clamping and round-half-away-from-zero.
fn from_unit(z: f32) -> u8 {
    let v = (z as f64 + 1.0) * 127.5;
    // snap to a 1/1024 grid so f32 storage error cannot flip an exact half-level
    let v = (v * 1024.0).round() / 1024.0;
    v.round().clamp(0.0, 255.0) as u8
}

/// Maps pixels from `[0, 255]` to a 3-channel latent in `[-1, 1]`.
pub fn image_to_unit(img: &ImageBuffer) -> FeatureMap {
    let (h, w) = (img.height, img.width);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (k, px) in img.pixels.iter().enumerate() {
        for c in 0..3 {
            data[c * plane + k] = to_unit(px[c]) as f32;
        }
    }
    FeatureMap::new(Shape::new(3, h, w), data).expect("finite by construction")
}

/// Inverse of [`image_to_unit`], clamping values outside `[-1, 1]`.
pub fn unit_to_image(z: &FeatureMap) -> Result<ImageBuffer> {
    let s = z.shape();
    if s.channels != 3 {
        return Err(Error::invalid(format!(
            "decoding needs a 3-channel map, got {} channels",
            s.channels
        )));
    }
    let plane = s.plane();
    let d = z.data();
    let pixels = (0..plane)
        .map(|k| [from_unit(d[k]), from_unit(d[plane + k]), from_unit(d[2 * plane + k])])
        .collect();
    ImageBuffer::new(s.height, s.width, pixels)
}

pub trait LatentCodec: Send {
    fn encode(&mut self, img: &ImageBuffer) -> Result<FeatureMap>;
    fn decode(&mut self, z: &FeatureMap) -> Result<ImageBuffer>;
    fn describe(&self) -> String;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn encode(&mut self, img: &ImageBuffer) -> Result<FeatureMap> {
        Ok(image_to_unit(img))
    }

    fn decode(&mut self, z: &FeatureMap) -> Result<ImageBuffer> {
        unit_to_image(z)
    }

    fn describe(&self) -> String {
        "identity".into()
    }
}

/// Range map followed by `k×k` mean pooling; decodes by nearest-neighbour upsampling.
#[derive(Debug, Clone, Copy)]
pub struct AvgPoolCodec {
    k: usize,
}

impl AvgPoolCodec {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig("avgpool factor must be at least 1".into()));
        }
        Ok(Self { k })
    }

    pub fn factor(&self) -> usize {
        self.k
    }
}

impl LatentCodec for AvgPoolCodec {
    fn encode(&mut self, img: &ImageBuffer) -> Result<FeatureMap> {
        let k = self.k;
        if !img.height.is_multiple_of(k) || !img.width.is_multiple_of(k) {
            return Err(Error::invalid(format!(
                "image {}x{} is not divisible by pooling factor {k}",
                img.height, img.width
            )));
        }
        let (h, w) = (img.height / k, img.width / k);
        let norm = (k * k) as f64;
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for di in 0..k {
                        for dj in 0..k {
                            acc += to_unit(img.get(i * k + di, j * k + dj)[c]);
                        }
                    }
                    data.push((acc / norm) as f32);
                }
            }
        }
        FeatureMap::new(Shape::new(3, h, w), data)
    }

    fn decode(&mut self, z: &FeatureMap) -> Result<ImageBuffer> {
        let s = z.shape();
        if s.channels != 3 {
            return Err(Error::invalid(format!(
                "decoding needs a 3-channel map, got {} channels",
                s.channels
            )));
        }
        let k = self.k;
        let (h, w) = (s.height * k, s.width * k);
        let mut up = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    up.push(z.get(c, i / k, j / k));
                }
            }
        }
        unit_to_image(&FeatureMap::new(Shape::new(3, h, w), up)?)
    }

    fn describe(&self) -> String {
        format!("avgpool:{}", self.k)
    }
}

/// Encoder/decoder served over the wire protocol. Images travel as
/// 3-channel maps in `[-1, 1]`, in both directions.
#[derive(Debug)]
pub struct RemoteCodec {
    client: RemoteClient,
}

impl RemoteCodec {
    pub fn connect(address: &str, timeout: Duration) -> Result<Self> {
        Ok(Self {
            client: RemoteClient::connect(address, timeout)?,
        })
    }
}

impl LatentCodec for RemoteCodec {
    fn encode(&mut self, img: &ImageBuffer) -> Result<FeatureMap> {
        self.client.call(&Request::encode(image_to_unit(img)))
    }

    fn decode(&mut self, z: &FeatureMap) -> Result<ImageBuffer> {
        let pixels = self.client.call(&Request::decode(z.clone()))?;
        unit_to_image(&pixels)
    }

    fn describe(&self) -> String {
        format!("remote:{}", self.client.address())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum CodecSpec {
    #[default]
    Identity,
    AvgPool(usize),
    Remote(String),
}

impl CodecSpec {
    pub fn build(&self, timeout: Duration) -> Result<Box<dyn LatentCodec>> {
        Ok(match self {
            CodecSpec::Identity => Box::new(IdentityCodec),
            CodecSpec::AvgPool(k) => Box::new(AvgPoolCodec::new(*k)?),
            CodecSpec::Remote(addr) => Box::new(RemoteCodec::connect(addr, timeout)?),
        })
    }
}

impl FromStr for CodecSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "identity" {
            return Ok(CodecSpec::Identity);
        }
        if let Some(k) = s.strip_prefix("avgpool:") {
            let k: usize = k
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad avgpool factor `{k}`")))?;
            AvgPoolCodec::new(k)?;
            return Ok(CodecSpec::AvgPool(k));
        }
        if let Some(addr) = s.strip_prefix("remote:") {
            return parse_address(addr).map(CodecSpec::Remote);
        }
        Err(Error::InvalidConfig(format!(
            "unknown codec `{s}` (expected identity, avgpool:K or remote:HOST:PORT)"
        )))
    }
}

impl fmt::Display for CodecSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodecSpec::Identity => f.write_str("identity"),
            CodecSpec::AvgPool(k) => write!(f, "avgpool:{k}"),
            CodecSpec::Remote(addr) => write!(f, "remote:{addr}"),
        }
    }
}

pub fn encode(codec: &mut dyn LatentCodec, img: &ImageBuffer) -> Result<FeatureMap> {
    codec.encode(img)
}

pub fn decode(codec: &mut dyn LatentCodec, z: &FeatureMap) -> Result<ImageBuffer> {
    codec.decode(z)
}
