//! Orthonormal type-II 2D DCT and its inverse, applied per channel.
//!
//! Both transforms are computed separably (rows, then columns) against a
//! precomputed cosine basis. Arithmetic is done in `f64`; [`FeatureMap`] and
//! [`Spectrum`] store `f32`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Channel count and spatial extent of a latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.plane()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid(format!(
                "shape {}x{}x{} has a zero dimension",
                self.channels, self.height, self.width
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

fn validate(shape: Shape, data: &[f32], what: &str) -> Result<()> {
    shape.check()?;
    if data.len() != shape.len() {
        return Err(Error::invalid(format!(
            "{what} of shape {shape} needs {} values, got {}",
            shape.len(),
            data.len()
        )));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} has a non-finite value at index {i}")));
    }
    Ok(())
}

/// A multichannel 2D latent, channel-major and row-major within a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    shape: Shape,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        validate(shape, &data, "feature map")?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Builds a map from `f64` values, rounding each to `f32` storage.
    pub fn from_f64(shape: Shape, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.shape.plane();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f32 {
        self.data[(c * self.shape.height + i) * self.shape.width + j]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn ensure_same_shape(&self, other: &FeatureMap) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "shape mismatch: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Elementwise `a * self + b * other`, evaluated in `f64`.
    pub fn affine_combine(&self, a: f64, other: &FeatureMap, b: f64) -> Result<FeatureMap> {
        self.ensure_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| (a * x as f64 + b * y as f64) as f32)
            .collect();
        FeatureMap::new(self.shape, data)
    }

    pub fn scale(&self, a: f64) -> FeatureMap {
        let data = self.data.iter().map(|&x| (a * x as f64) as f32).collect();
        FeatureMap {
            shape: self.shape,
            data,
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    /// `‖self − other‖₂ / ‖other‖₂`.
    pub fn relative_error(&self, reference: &FeatureMap) -> f64 {
        let num: f64 = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        (num / reference.norm_sq()).sqrt()
    }
}

/// DCT coefficients of a [`FeatureMap`], same layout; element `(u, v)` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    shape: Shape,
    data: Vec<f32>,
}

impl Spectrum {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        validate(shape, &data, "spectrum")?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, u: usize, v: usize) -> f32 {
        self.data[(c * self.shape.height + u) * self.shape.width + v]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}

/// Orthonormal DCT-II basis: `basis[k * n + i] = m(k) √(2/n) cos((2i+1)kπ / 2n)`.
fn basis(n: usize) -> Vec<f64> {
    let scale = (2.0 / n as f64).sqrt();
    let mut b = vec![0.0; n * n];
    for k in 0..n {
        let m = if k == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
        for i in 0..n {
            b[k * n + i] = m * scale * (((2 * i + 1) * k) as f64 * PI / (2 * n) as f64).cos();
        }
    }
    b
}

#[derive(Clone, Copy)]
enum Direction {
    Forward,
    Inverse,
}

/// Cached bases for one `(h, w)` grid.
pub(crate) struct Dct2Plan {
    h: usize,
    w: usize,
    row_basis: Vec<f64>,
    col_basis: Vec<f64>,
}

impl Dct2Plan {
    pub(crate) fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            row_basis: basis(h),
            col_basis: basis(w),
        }
    }

    fn apply_plane(&self, input: &[f64], out: &mut [f64], scratch: &mut [f64], dir: Direction) {
        let (h, w) = (self.h, self.w);
        // along rows (the width axis) first
        for i in 0..h {
            let row = &input[i * w..(i + 1) * w];
            for k in 0..w {
                let mut acc = 0.0;
                match dir {
                    Direction::Forward => {
                        let b = &self.col_basis[k * w..(k + 1) * w];
                        for j in 0..w {
                            acc += b[j] * row[j];
                        }
                    }
                    Direction::Inverse => {
                        for (j, r) in row.iter().enumerate() {
                            acc += self.col_basis[j * w + k] * r;
                        }
                    }
                }
                scratch[i * w + k] = acc;
            }
        }
        // then along columns
        for k in 0..h {
            let o = &mut out[k * w..(k + 1) * w];
            o.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..h {
                let coef = match dir {
                    Direction::Forward => self.row_basis[k * h + i],
                    Direction::Inverse => self.row_basis[i * h + k],
                };
                let src = &scratch[i * w..(i + 1) * w];
                for (dst, s) in o.iter_mut().zip(src) {
                    *dst += coef * s;
                }
            }
        }
    }

    fn apply(&self, channels: usize, input: &[f64], dir: Direction) -> Vec<f64> {
        let plane = self.h * self.w;
        let mut out = vec![0.0; channels * plane];
        let mut scratch = vec![0.0; plane];
        for c in 0..channels {
            self.apply_plane(
                &input[c * plane..(c + 1) * plane],
                &mut out[c * plane..(c + 1) * plane],
                &mut scratch,
                dir,
            );
        }
        out
    }

    pub(crate) fn forward(&self, channels: usize, input: &[f64]) -> Vec<f64> {
        self.apply(channels, input, Direction::Forward)
    }

    pub(crate) fn inverse(&self, channels: usize, input: &[f64]) -> Vec<f64> {
        self.apply(channels, input, Direction::Inverse)
    }
}

pub fn dct2(z: &FeatureMap) -> Result<Spectrum> {
    validate(z.shape, &z.data, "feature map")?;
    let s = z.shape;
    let out = Dct2Plan::new(s.height, s.width).forward(s.channels, &z.to_f64());
    Spectrum::new(s, out.into_iter().map(|v| v as f32).collect())
}

pub fn idct2(f: &Spectrum) -> Result<FeatureMap> {
    validate(f.shape, &f.data, "spectrum")?;
    let s = f.shape;
    let input: Vec<f64> = f.data.iter().map(|&v| v as f64).collect();
    let out = Dct2Plan::new(s.height, s.width).inverse(s.channels, &input);
    FeatureMap::from_f64(s, &out)
}

/// `dct2` at full `f64` precision, for callers that keep the spectrum internal.
pub fn dct2_f64(shape: Shape, data: &[f64]) -> Result<Vec<f64>> {
    check_f64(shape, data)?;
    Ok(Dct2Plan::new(shape.height, shape.width).forward(shape.channels, data))
}

pub fn idct2_f64(shape: Shape, data: &[f64]) -> Result<Vec<f64>> {
    check_f64(shape, data)?;
    Ok(Dct2Plan::new(shape.height, shape.width).inverse(shape.channels, data))
}

fn check_f64(shape: Shape, data: &[f64]) -> Result<()> {
    shape.check()?;
    if data.len() != shape.len() {
        return Err(Error::invalid(format!(
            "buffer of shape {shape} needs {} values, got {}",
            shape.len(),
            data.len()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("buffer has a non-finite value"));
    }
    Ok(())
}
