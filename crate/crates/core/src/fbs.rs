//! Frequency band substitution: move one DCT band of a guide latent into a target latent.

use crate::error::{Error, Result};
use crate::masks::BandMask;
use crate::spectral::{Dct2Plan, FeatureMap};

/// Returns `idct2(dct2(guide)·mask + dct2(target)·(1 − mask))`.
///
/// The mask is shared by every channel. Both spectra stay in `f64`; only the
/// result is rounded to `f32`.
pub fn substitute_band(guide: &FeatureMap, target: &FeatureMap, mask: &BandMask) -> Result<FeatureMap> {
    guide.ensure_same_shape(target)?;
    let shape = guide.shape();
    if mask.height() != shape.height || mask.width() != shape.width {
        return Err(Error::invalid(format!(
            "mask grid {}x{} does not match latent {}",
            mask.height(),
            mask.width(),
            shape
        )));
    }

    let plan = Dct2Plan::new(shape.height, shape.width);
    let g = plan.forward(shape.channels, &guide.to_f64());
    let mut mixed = plan.forward(shape.channels, &target.to_f64());
    let plane = shape.plane();
    for c in 0..shape.channels {
        let base = c * plane;
        for (k, &bit) in mask.bits().iter().enumerate() {
            if bit {
                mixed[base + k] = g[base + k];
            }
        }
    }
    FeatureMap::from_f64(shape, &plan.inverse(shape.channels, &mixed))
}
