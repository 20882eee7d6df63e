//! Spectral-band mixing augmentations.
//!
//! Both modes blend two patches band-wise with the same convex formula
//! `out = lambda * x1 + (1 - lambda) * x2`; they differ in which bands
//! get mixed. Mixup draws lambda from U(0, 1) and mixes every band.
//! CutMix draws lambda from Beta(alpha, alpha) and mixes a contiguous
//! spectral window whose width is the (1 - lambda) fraction of the bands,
//! leaving the rest of x1 untouched.

use serde::{Deserialize, Serialize};

use crate::datacube::CubePatch;
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    Mixup,
    Cutmix,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MixConfig {
    pub mode: MixMode,
    /// Beta concentration for CutMix; must be positive.
    pub alpha: f64,
    pub seed: u64,
}

impl MixConfig {
    pub fn mixup(seed: u64) -> Self {
        MixConfig {
            mode: MixMode::Mixup,
            alpha: 1.0,
            seed,
        }
    }

    pub fn cutmix(alpha: f64, seed: u64) -> Self {
        MixConfig {
            mode: MixMode::Cutmix,
            alpha,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "mix alpha must be > 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Mixing weight: Beta(alpha, alpha) in CutMix mode, U(0, 1) in Mixup mode.
pub fn draw_lambda(cfg: &MixConfig, stream: &mut Stream) -> f64 {
    match cfg.mode {
        MixMode::Mixup => stream.next_f64(),
        MixMode::Cutmix => stream.beta(cfg.alpha, cfg.alpha),
    }
}

/// Default band selection for a mode: all bands for Mixup; for CutMix a
/// contiguous window covering the (1 - lambda) fraction of bands
/// (rounded, at least one band), placed uniformly.
pub fn draw_band_set(
    cfg: &MixConfig,
    bands: usize,
    lambda: f64,
    stream: &mut Stream,
) -> Vec<usize> {
    match cfg.mode {
        MixMode::Mixup => (0..bands).collect(),
        MixMode::Cutmix => {
            let width = (((1.0 - lambda) * bands as f64).round() as usize).clamp(1, bands);
            let start = stream.uniform_usize(bands - width + 1);
            (start..start + width).collect()
        }
    }
}

/// Convex band blend. Bands in `band_set` become
/// `lambda * x1 + (1 - lambda) * x2`; all other bands are copied from
/// `x1` bit-identically. `None` mixes every band.
pub fn mix_bands(
    x1: &CubePatch,
    x2: &CubePatch,
    lambda: f64,
    band_set: Option<&[usize]>,
) -> Result<CubePatch> {
    let extent = x1.extent();
    if x2.extent() != extent {
        return Err(Error::Dimension(format!(
            "patch extents differ: {} vs {}",
            extent,
            x2.extent()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must be in [0, 1], got {lambda}")));
    }
    let mut mixed = vec![false; extent];
    match band_set {
        None => mixed.fill(true),
        Some(set) => {
            for &band in set {
                if band >= extent {
                    return Err(Error::Index(format!(
                        "band {band} out of range (patch bands = {extent})"
                    )));
                }
                mixed[band] = true;
            }
        }
    }

    let w1 = lambda;
    let w2 = 1.0 - lambda;
    let mut values = x1.values.clone();
    for (k, out) in values.iter_mut().enumerate() {
        let band = k % extent;
        if mixed[band] {
            *out = (w1 * x1.values[k] as f64 + w2 * x2.values[k] as f64) as f32;
        }
    }
    CubePatch::new(x1.index, values, x1.source_id.clone())
}
