//! Binary DCT band masks selected by coordinate-sum thresholds.
//!
//! A coefficient at `(x, y)` belongs to a band according to `x + y`:
//! low keeps `x + y <= th`, high keeps `x + y > th`, and mid keeps
//! `lo < x + y <= hi`.

use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Which band a mask selects, with its thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandKind {
    Low { th: i64 },
    High { th: i64 },
    Mid { lower: i64, upper: i64 },
    Full,
    Empty,
}

impl BandKind {
    pub fn validate(&self) -> Result<()> {
        if let BandKind::Mid { lower, upper } = *self {
            if lower >= upper {
                return Err(Error::InvalidThreshold { lower, upper });
            }
        }
        Ok(())
    }

    fn contains(&self, sum: i64) -> bool {
        match *self {
            BandKind::Low { th } => sum <= th,
            BandKind::High { th } => sum > th,
            BandKind::Mid { lower, upper } => lower < sum && sum <= upper,
            BandKind::Full => true,
            BandKind::Empty => false,
        }
    }
}

impl fmt::Display for BandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BandKind::Low { th } => write!(f, "low(th_lp={th})"),
            BandKind::High { th } => write!(f, "high(th_hp={th})"),
            BandKind::Mid { lower, upper } => write!(f, "mid(th_mp1={lower}, th_mp2={upper})"),
            BandKind::Full => f.write_str("full"),
            BandKind::Empty => f.write_str("empty"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandMask {
    kind: BandKind,
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BandMask {
    pub fn new(kind: BandKind, height: usize, width: usize) -> Result<Self> {
        kind.validate()?;
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!("mask grid {height}x{width} is empty")));
        }
        let mut bits = Vec::with_capacity(height * width);
        for x in 0..height {
            for y in 0..width {
                bits.push(kind.contains((x + y) as i64));
            }
        }
        Ok(Self {
            kind,
            height,
            width,
            bits,
        })
    }

    pub fn kind(&self) -> BandKind {
        self.kind
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[x * self.width + y]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn is_all_zeros(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Binary PGM (`P5`), 255 where the mask is set.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pgm())?;
        Ok(())
    }
}

pub fn make_mask(kind: BandKind, height: usize, width: usize) -> Result<BandMask> {
    BandMask::new(kind, height, width)
}

pub fn mask_popcount(mask: &BandMask) -> usize {
    mask.popcount()
}
