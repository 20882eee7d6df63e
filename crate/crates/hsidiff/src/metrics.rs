//! Full-reference quality metrics: PSNR, SSIM (uniform window), and the
//! spectral angle mapper. Reductions use pairwise summation so results do
//! not depend on traversal chunking.

use serde::{Deserialize, Serialize};

use crate::datacube::HyperCube;
use crate::error::{Error, Result};
use crate::util::{pairwise_mean, pairwise_sum};

/// SSIM/PSNR settings echoed into every report.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Peak-to-peak data range (1.0 for normalized cubes).
    pub data_range: f64,
    /// Side of the uniform SSIM window.
    pub ssim_window: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            data_range: 1.0,
            ssim_window: 7,
        }
    }
}

/// Peak signal-to-noise ratio in dB over all voxels. Returns
/// `f64::INFINITY` when the cubes are identical (MSE = 0); report
/// serialization flags that case instead of emitting a number.
pub fn psnr(reference: &HyperCube, test: &HyperCube, data_range: f64) -> Result<f64> {
    reference.same_shape(test)?;
    if !(data_range > 0.0) {
        return Err(Error::Config(format!(
            "data_range must be > 0, got {data_range}"
        )));
    }
    let sq: Vec<f64> = reference
        .values()
        .iter()
        .zip(test.values())
        .map(|(&r, &t)| {
            let d = r as f64 - t as f64;
            d * d
        })
        .collect();
    let mse = pairwise_mean(&sq);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Mean local SSIM of one band plane with a uniform `window` x `window`
/// kernel and Wang et al. constants C1 = (0.01 r)^2, C2 = (0.03 r)^2.
/// Returns the score and whether the window had to be shrunk to fit.
pub fn ssim_plane(
    reference: &[f32],
    test: &[f32],
    lines: usize,
    samples: usize,
    data_range: f64,
    window: usize,
) -> Result<(f64, bool)> {
    if reference.len() != lines * samples || test.len() != lines * samples {
        return Err(Error::Dimension(format!(
            "plane length != {lines}x{samples}"
        )));
    }
    if window == 0 {
        return Err(Error::Config("ssim window must be >= 1".into()));
    }
    let effective = window.min(lines).min(samples);
    let shrunk = effective != window;
    let n = (effective * effective) as f64;
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);

    let mut scores = Vec::with_capacity((lines - effective + 1) * (samples - effective + 1));
    for top in 0..=lines - effective {
        for left in 0..=samples - effective {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dl in 0..effective {
                for ds in 0..effective {
                    let idx = (top + dl) * samples + left + ds;
                    let x = reference[idx] as f64;
                    let y = test[idx] as f64;
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    syy += y * y;
                    sxy += x * y;
                }
            }
            let mx = sx / n;
            let my = sy / n;
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cov = sxy / n - mx * my;
            let score = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            scores.push(score);
        }
    }
    Ok((pairwise_mean(&scores), shrunk))
}

/// Cube-level SSIM: mean over per-band plane scores.
pub fn ssim(reference: &HyperCube, test: &HyperCube, data_range: f64, window: usize) -> Result<f64> {
    let (per_band, _) = ssim_per_band(reference, test, data_range, window)?;
    Ok(pairwise_mean(&per_band))
}

fn ssim_per_band(
    reference: &HyperCube,
    test: &HyperCube,
    data_range: f64,
    window: usize,
) -> Result<(Vec<f64>, bool)> {
    reference.same_shape(test)?;
    let mut scores = Vec::with_capacity(reference.bands);
    let mut any_shrunk = false;
    for band in 0..reference.bands {
        let rp = reference.band_plane(band)?;
        let tp = test.band_plane(band)?;
        let (score, shrunk) = ssim_plane(
            &rp,
            &tp,
            reference.lines,
            reference.samples,
            data_range,
            window,
        )?;
        any_shrunk |= shrunk;
        scores.push(score);
    }
    Ok((scores, any_shrunk))
}

/// Spectral angle result.
#[derive(Debug, Clone, Copy)]
pub struct SamResult {
    /// Mean per-pixel angle in radians over pixels with nonzero spectra.
    pub mean_rad: f64,
    /// Pixels skipped because either spectrum had zero norm.
    pub skipped: usize,
}

/// Mean spectral angle between per-pixel spectra: the angle whose cosine
/// is `<r, t> / (|r| |t|)`, clamped to [-1, 1]. Evaluated as
/// `atan2(sqrt(|r|^2 |t|^2 - <r, t>^2), <r, t>)`, which is the same
/// quantity but exact at 0, pi/4 and pi/2 where acos loses precision.
/// Zero-norm pixels are skipped and counted; if every pixel is skipped
/// the metric is undefined.
pub fn sam(reference: &HyperCube, test: &HyperCube) -> Result<SamResult> {
    reference.same_shape(test)?;
    let bands = reference.bands;
    let mut angles = Vec::with_capacity(reference.lines * reference.samples);
    let mut skipped = 0usize;
    for line in 0..reference.lines {
        for sample in 0..reference.samples {
            let base = reference.index(line, sample, 0);
            let (mut dot, mut nr, mut nt) = (0.0f64, 0.0f64, 0.0f64);
            for b in 0..bands {
                let r = reference.values()[base + b] as f64;
                let t = test.values()[base + b] as f64;
                dot += r * t;
                nr += r * r;
                nt += t * t;
            }
            if nr == 0.0 || nt == 0.0 {
                skipped += 1;
                continue;
            }
            let cross = (nr * nt - dot * dot).max(0.0).sqrt();
            angles.push(cross.atan2(dot));
        }
    }
    if angles.is_empty() {
        return Err(Error::UndefinedMetric(
            "all pixel spectra have zero norm".into(),
        ));
    }
    Ok(SamResult {
        mean_rad: pairwise_sum(&angles) / angles.len() as f64,
        skipped,
    })
}

/// Per-band metric lists for a report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerBandMetrics {
    /// None marks a band with zero MSE (infinite PSNR).
    pub psnr_db: Vec<Option<f64>>,
    pub ssim: Vec<f64>,
}

/// Aggregate quality report. `lpips` is reserved for an external
/// perceptual score and never produced here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: Option<f64>,
    pub psnr_infinite: bool,
    pub ssim: f64,
    pub ssim_window_shrunk: bool,
    pub sam_rad: f64,
    pub sam_deg: f64,
    pub sam_skipped_pixels: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_band: Option<PerBandMetrics>,
    pub data_range: f64,
    pub ssim_window: usize,
    pub ssim_window_kind: String,
}

/// Compute the full report (cube-level plus per-band lists).
pub fn evaluate(reference: &HyperCube, test: &HyperCube, cfg: &MetricConfig) -> Result<MetricReport> {
    let psnr_value = psnr(reference, test, cfg.data_range)?;
    let (ssim_bands, shrunk) = ssim_per_band(reference, test, cfg.data_range, cfg.ssim_window)?;
    let ssim_value = pairwise_mean(&ssim_bands);
    let sam_value = sam(reference, test)?;

    let mut psnr_bands = Vec::with_capacity(reference.bands);
    for band in 0..reference.bands {
        let rp = reference.band_plane(band)?;
        let tp = test.band_plane(band)?;
        let sq: Vec<f64> = rp
            .iter()
            .zip(&tp)
            .map(|(&r, &t)| {
                let d = r as f64 - t as f64;
                d * d
            })
            .collect();
        let mse = pairwise_mean(&sq);
        psnr_bands.push(if mse == 0.0 {
            None
        } else {
            Some(10.0 * (cfg.data_range * cfg.data_range / mse).log10())
        });
    }

    Ok(MetricReport {
        psnr_db: if psnr_value.is_finite() {
            Some(psnr_value)
        } else {
            None
        },
        psnr_infinite: psnr_value.is_infinite(),
        ssim: ssim_value,
        ssim_window_shrunk: shrunk,
        sam_rad: sam_value.mean_rad,
        sam_deg: sam_value.mean_rad.to_degrees(),
        sam_skipped_pixels: sam_value.skipped,
        lpips: None,
        per_band: Some(PerBandMetrics {
            psnr_db: psnr_bands,
            ssim: ssim_bands,
        }),
        data_range: cfg.data_range,
        ssim_window: cfg.ssim_window,
        ssim_window_kind: "uniform".into(),
    })
}

/// Plain-text table for console output.
pub fn format_report(report: &MetricReport) -> String {
    let psnr_text = if report.psnr_infinite {
        "inf (identical)".to_string()
    } else {
        format!("{:.4} dB", report.psnr_db.unwrap_or(f64::NAN))
    };
    format!(
        "metric   value\n\
         ------   -----\n\
         PSNR     {psnr_text}\n\
         SSIM     {:.6}\n\
         SAM      {:.6} rad ({:.4} deg)\n",
        report.ssim, report.sam_rad, report.sam_deg
    )
}
