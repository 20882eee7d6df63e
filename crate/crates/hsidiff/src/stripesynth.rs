//! Synthetic stripe-noise generator.
//!
//! Per band: a base stripe intensity is drawn from U(0.01, 0.3), jittered
//! and clamped to at least 0.001, columns are selected by independent
//! Bernoulli trials at the configured stripe frequency, each selected
//! column is split into uniformly-many fragments of uniform length, and
//! the masked voxels receive i.i.d. Gaussian noise scaled by the band's
//! dynamic range and intensity factor.
//!
//! All draws come from seed-derived substreams keyed by band (and column),
//! so band-level synthesis can run in any order or thread count and still
//! produce bit-identical output.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datacube::{dynamic_range, HyperCube};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::util::write_atomic;

/// Axis a stripe runs along. Pushbroom artifacts run along-track, i.e. a
/// striped "column" has a fixed sample index and spans line indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StripeAxis {
    AlongLines,
    AlongSamples,
}

/// Stripe model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripeConfig {
    /// Gaussian field standard deviation. Interpreted as a fraction of
    /// each band's dynamic range unless `sigma_absolute` is set.
    pub sigma: f64,
    pub sigma_absolute: bool,
    /// Expected fraction of columns striped per band, in (0, 1].
    pub stripe_frequency: f64,
    pub fragments_min: usize,
    pub fragments_max: usize,
    /// Fragment length bounds as fractions of the column height.
    pub min_fragment_len: f64,
    pub max_fragment_len: f64,
    pub axis: StripeAxis,
    pub seed: u64,
}

impl StripeConfig {
    pub fn new(seed: u64) -> Self {
        StripeConfig {
            sigma: 0.05,
            sigma_absolute: false,
            stripe_frequency: 0.15,
            fragments_min: 1,
            fragments_max: 5,
            min_fragment_len: 0.1,
            max_fragment_len: 1.0,
            axis: StripeAxis::AlongLines,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.stripe_frequency > 0.0 && self.stripe_frequency <= 1.0) {
            return Err(Error::Config(format!(
                "stripe_frequency must be in (0, 1], got {}",
                self.stripe_frequency
            )));
        }
        if self.fragments_min == 0 || self.fragments_min > self.fragments_max {
            return Err(Error::Config(format!(
                "fragment count bounds must satisfy 1 <= min <= max, got [{}, {}]",
                self.fragments_min, self.fragments_max
            )));
        }
        if !(self.min_fragment_len > 0.0
            && self.min_fragment_len <= self.max_fragment_len
            && self.max_fragment_len <= 1.0)
        {
            return Err(Error::Config(format!(
                "fragment length fractions must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.min_fragment_len, self.max_fragment_len
            )));
        }
        Ok(())
    }
}

/// One placed stripe fragment within a column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    pub start: usize,
    pub len: usize,
}

/// Striping drawn for one column of one band.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnStripes {
    pub column: usize,
    pub fragments: Vec<Fragment>,
    /// Placement had to drop or truncate fragments to stay feasible.
    pub degraded: bool,
}

/// Striping drawn for one band.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandStripes {
    pub band: usize,
    pub base_intensity: f64,
    pub factor: f64,
    pub columns: Vec<ColumnStripes>,
}

impl BandStripes {
    pub fn column_indices(&self) -> Vec<usize> {
        self.columns.iter().map(|c| c.column).collect()
    }
}

/// Concrete realization of the stripe model on one cube: all per-band
/// draws plus the additive field at masked voxels.
#[derive(Debug, Clone)]
pub struct StripeRealization {
    pub config: StripeConfig,
    pub bands: Vec<BandStripes>,
    /// (flat canonical index, additive value) for every masked voxel.
    pub field: Vec<(usize, f32)>,
}

impl StripeRealization {
    pub fn mask_len(&self) -> usize {
        self.field.len()
    }
}

/// Base stripe intensity, uniform on [0.01, 0.3).
pub fn draw_base_intensity(stream: &mut Stream) -> f64 {
    stream.uniform(0.01, 0.3)
}

/// Intensity factor given the jitter draw `u` in [0, 0.1):
/// `max(0.001, base - 0.05 + u)`.
pub fn intensity_factor_with(base: f64, u: f64) -> f64 {
    (base - 0.05 + u).max(0.001)
}

/// Intensity factor with the jitter drawn from `stream`.
pub fn intensity_factor(base: f64, stream: &mut Stream) -> f64 {
    intensity_factor_with(base, stream.uniform(0.0, 0.1))
}

/// Independent Bernoulli(frequency) trial per column; returns selected
/// column indices in ascending order.
pub fn select_columns(count: usize, frequency: f64, stream: &mut Stream) -> Vec<usize> {
    (0..count).filter(|_| stream.bernoulli(frequency)).collect()
}

const PLACEMENT_RETRIES: usize = 16;

/// Draw and place fragments for one column of height `lines`.
///
/// Fragment count is discrete-uniform on [fragments_min, fragments_max];
/// each length is uniform on [min, max] fractions of the height (rounded,
/// at least one row). Placement rejects overlaps with a bounded retry
/// budget, then truncates into the largest free gap; fragments that still
/// cannot be placed are dropped and the column is marked degraded.
pub fn fragment_column(
    lines: usize,
    cfg: &StripeConfig,
    stream: &mut Stream,
) -> (Vec<Fragment>, bool) {
    let k = stream.uniform_range(cfg.fragments_min, cfg.fragments_max);
    let mut placed: Vec<Fragment> = Vec::with_capacity(k);
    let mut degraded = false;

    'fragments: for _ in 0..k {
        let frac = stream.uniform(cfg.min_fragment_len, cfg.max_fragment_len);
        let len = ((frac * lines as f64).round() as usize).clamp(1, lines);

        for _ in 0..PLACEMENT_RETRIES {
            let start = stream.uniform_usize(lines - len + 1);
            let candidate = Fragment { start, len };
            if !placed.iter().any(|f| overlaps(f, &candidate)) {
                placed.push(candidate);
                continue 'fragments;
            }
        }
        // Retry budget exhausted: truncate into the largest free gap.
        degraded = true;
        if let Some((gap_start, gap_len)) = largest_gap(&placed, lines) {
            placed.push(Fragment {
                start: gap_start,
                len: len.min(gap_len),
            });
        }
        // No gap at all: drop the fragment.
    }
    placed.sort_by_key(|f| f.start);
    (placed, degraded)
}

fn overlaps(a: &Fragment, b: &Fragment) -> bool {
    a.start < b.start + b.len && b.start < a.start + a.len
}

fn largest_gap(placed: &[Fragment], lines: usize) -> Option<(usize, usize)> {
    let mut sorted: Vec<&Fragment> = placed.iter().collect();
    sorted.sort_by_key(|f| f.start);
    let mut best: Option<(usize, usize)> = None;
    let mut cursor = 0;
    for f in &sorted {
        if f.start > cursor {
            let gap = (cursor, f.start - cursor);
            if best.is_none_or(|(_, len)| gap.1 > len) {
                best = Some(gap);
            }
        }
        cursor = cursor.max(f.start + f.len);
    }
    if lines > cursor {
        let gap = (cursor, lines - cursor);
        if best.is_none_or(|(_, len)| gap.1 > len) {
            best = Some(gap);
        }
    }
    best
}

/// Substream labels under each band's fork.
const SUB_INTENSITY: u64 = 0;
const SUB_COLUMNS: u64 = 1;
const SUB_FRAGMENTS: u64 = 2;
const SUB_FIELD: u64 = 3;

/// Add synthetic stripes to `cube`. Off-mask voxels are untouched;
/// masked voxels receive `N(0, (sigma_eff)^2) * factor(band)` where
/// `sigma_eff` is `sigma * dynamic_range(band)` (or plain `sigma` in
/// absolute mode).
pub fn synth_stripes(cube: &HyperCube, cfg: &StripeConfig) -> Result<(HyperCube, StripeRealization)> {
    cfg.validate()?;
    let root = Stream::new(cfg.seed);
    let (lines, samples, bands) = cube.shape();
    let (column_count, column_height) = match cfg.axis {
        StripeAxis::AlongLines => (samples, lines),
        StripeAxis::AlongSamples => (lines, samples),
    };

    let mut values = cube.values().to_vec();
    let mut band_records = Vec::with_capacity(bands);
    let mut field = Vec::new();

    for band in 0..bands {
        let band_stream = root.fork(band as u64);
        let mut intensity = band_stream.fork(SUB_INTENSITY);
        let base_intensity = draw_base_intensity(&mut intensity);
        let factor = intensity_factor(base_intensity, &mut intensity);

        let mut col_stream = band_stream.fork(SUB_COLUMNS);
        let selected = select_columns(column_count, cfg.stripe_frequency, &mut col_stream);

        let range = dynamic_range(cube, band)?;
        let sigma_eff = if cfg.sigma_absolute {
            cfg.sigma
        } else {
            cfg.sigma * range
        };
        let amplitude = sigma_eff * factor;

        let mut columns = Vec::with_capacity(selected.len());
        for column in selected {
            let mut frag_stream = band_stream.fork2(SUB_FRAGMENTS, column as u64);
            let (fragments, degraded) = fragment_column(column_height, cfg, &mut frag_stream);
            let mut noise = band_stream.fork2(SUB_FIELD, column as u64);
            for fragment in &fragments {
                for row in fragment.start..fragment.start + fragment.len {
                    let (line, sample) = match cfg.axis {
                        StripeAxis::AlongLines => (row, column),
                        StripeAxis::AlongSamples => (column, row),
                    };
                    let value = (noise.normal() * amplitude) as f32;
                    let flat = cube.index(line, sample, band);
                    values[flat] += value;
                    field.push((flat, value));
                }
            }
            columns.push(ColumnStripes {
                column,
                fragments,
                degraded,
            });
        }
        band_records.push(BandStripes {
            band,
            base_intensity,
            factor,
            columns,
        });
    }

    let striped = HyperCube::new(
        lines,
        samples,
        bands,
        values,
        cube.wavelengths.clone(),
        cube.interleave,
    )?
    .with_id(format!("{}-striped", cube.id));
    let realization = StripeRealization {
        config: cfg.clone(),
        bands: band_records,
        field,
    };
    Ok((striped, realization))
}

/// Serialized form of a clean/striped pair: everything needed to
/// re-derive the mask and field bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PairManifest {
    pub version: u32,
    pub seed: u64,
    pub clean: String,
    pub striped: String,
    pub config: StripeConfig,
    pub bands: Vec<BandManifest>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BandManifest {
    pub band: usize,
    pub base_intensity: f64,
    pub factor: f64,
    pub columns: Vec<usize>,
    pub degraded_columns: Vec<usize>,
    /// Column index (as string key) to [start, len] fragment rows.
    pub fragments: BTreeMap<String, Vec<[usize; 2]>>,
}

pub const MANIFEST_VERSION: u32 = 1;

/// Build the manifest describing a written clean/striped pair.
pub fn build_pair_manifest(
    clean: &Path,
    striped: &Path,
    realization: &StripeRealization,
) -> PairManifest {
    let bands = realization
        .bands
        .iter()
        .map(|b| {
            let mut fragments = BTreeMap::new();
            let mut degraded = Vec::new();
            for col in &b.columns {
                fragments.insert(
                    col.column.to_string(),
                    col.fragments.iter().map(|f| [f.start, f.len]).collect(),
                );
                if col.degraded {
                    degraded.push(col.column);
                }
            }
            BandManifest {
                band: b.band,
                base_intensity: b.base_intensity,
                factor: b.factor,
                columns: b.column_indices(),
                degraded_columns: degraded,
                fragments,
            }
        })
        .collect();
    PairManifest {
        version: MANIFEST_VERSION,
        seed: realization.config.seed,
        clean: clean.to_string_lossy().into_owned(),
        striped: striped.to_string_lossy().into_owned(),
        config: realization.config.clone(),
        bands,
    }
}

/// Write the pair manifest as pretty JSON.
pub fn emit_pair_manifest(
    clean: &Path,
    striped: &Path,
    realization: &StripeRealization,
    out: &Path,
) -> Result<PairManifest> {
    let manifest = build_pair_manifest(clean, striped, realization);
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(out, &json)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datacube::Interleave;

    fn test_cube(lines: usize, samples: usize, bands: usize, seed: u64) -> HyperCube {
        let mut s = Stream::new(seed);
        let values: Vec<f32> = (0..lines * samples * bands)
            .map(|_| s.uniform(0.1, 0.9) as f32)
            .collect();
        HyperCube::new(lines, samples, bands, values, None, Interleave::Bsq).unwrap()
    }

    #[test]
    fn base_intensity_support_and_mean() {
        let mut s = Stream::new(5);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let v = draw_base_intensity(&mut s);
            assert!((0.01..0.3).contains(&v));
            sum += v;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.155).abs() < 0.003, "mean {mean}");
    }

    #[test]
    fn base_intensity_is_deterministic() {
        let mut a = Stream::new(9);
        let mut b = Stream::new(9);
        for _ in 0..100 {
            assert_eq!(draw_base_intensity(&mut a), draw_base_intensity(&mut b));
        }
    }

    #[test]
    fn intensity_factor_direct_cases() {
        assert_eq!(intensity_factor_with(0.3, 0.1), 0.35);
        assert_eq!(intensity_factor_with(0.01, 0.0), 0.001);
        assert!((intensity_factor_with(0.06, 0.05) - 0.06).abs() < 1e-15);
    }

    #[test]
    fn intensity_factor_clamp_always_holds() {
        let mut s = Stream::new(1);
        for _ in 0..100_000 {
            let base = draw_base_intensity(&mut s);
            let f = intensity_factor(base, &mut s);
            assert!(f >= 0.001);
        }
    }

    #[test]
    fn select_columns_full_frequency_selects_all() {
        let mut s = Stream::new(2);
        let cols = select_columns(50, 1.0, &mut s);
        assert_eq!(cols, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn select_columns_fraction_tracks_frequency() {
        for seed in 0..5u64 {
            let mut s = Stream::new(seed);
            let cols = select_columns(1000, 0.2, &mut s);
            let frac = cols.len() as f64 / 1000.0;
            assert!((frac - 0.2).abs() < 0.04, "seed {seed}: {frac}");
        }
    }

    #[test]
    fn select_columns_is_deterministic() {
        let mut a = Stream::new(3);
        let mut b = Stream::new(3);
        assert_eq!(select_columns(100, 0.3, &mut a), select_columns(100, 0.3, &mut b));
    }

    #[test]
    fn forced_full_column_fragment() {
        let mut cfg = StripeConfig::new(0);
        cfg.fragments_min = 1;
        cfg.fragments_max = 1;
        cfg.min_fragment_len = 1.0;
        cfg.max_fragment_len = 1.0;
        let mut s = Stream::new(4);
        let (frags, degraded) = fragment_column(64, &cfg, &mut s);
        assert_eq!(frags, vec![Fragment { start: 0, len: 64 }]);
        assert!(!degraded);
    }

    #[test]
    fn fragments_are_disjoint_and_in_bounds() {
        let cfg = StripeConfig::new(0);
        let mut s = Stream::new(5);
        for _ in 0..2000 {
            let (frags, _) = fragment_column(37, &cfg, &mut s);
            for (i, f) in frags.iter().enumerate() {
                assert!(f.len >= 1);
                assert!(f.start + f.len <= 37, "{f:?}");
                for g in &frags[i + 1..] {
                    assert!(!overlaps(f, g), "{f:?} overlaps {g:?}");
                }
            }
        }
    }

    #[test]
    fn fragment_count_histogram_is_uniform() {
        let mut cfg = StripeConfig::new(0);
        cfg.fragments_min = 1;
        cfg.fragments_max = 4;
        // Short fragments so the drawn count is always placeable.
        cfg.min_fragment_len = 0.02;
        cfg.max_fragment_len = 0.05;
        let mut s = Stream::new(6);
        let n = 10_000;
        let mut histogram = [0usize; 4];
        for _ in 0..n {
            let (frags, _) = fragment_column(200, &cfg, &mut s);
            histogram[frags.len() - 1] += 1;
        }
        for (k, &count) in histogram.iter().enumerate() {
            let freq = count as f64 / n as f64;
            assert!((freq - 0.25).abs() < 0.03, "k={} freq={freq}", k + 1);
        }
    }

    #[test]
    fn infeasible_config_degrades_but_never_aborts() {
        let mut cfg = StripeConfig::new(0);
        cfg.fragments_min = 8;
        cfg.fragments_max = 8;
        cfg.min_fragment_len = 0.9;
        cfg.max_fragment_len = 1.0;
        let mut s = Stream::new(7);
        let (frags, degraded) = fragment_column(10, &cfg, &mut s);
        assert!(degraded);
        assert!(frags.len() < 8);
        for (i, f) in frags.iter().enumerate() {
            assert!(f.start + f.len <= 10);
            for g in &frags[i + 1..] {
                assert!(!overlaps(f, g));
            }
        }
    }

    #[test]
    fn vanishing_sigma_leaves_cube_unchanged() {
        let cube = test_cube(16, 16, 4, 8);
        let mut cfg = StripeConfig::new(11);
        cfg.sigma = 1e-30;
        let (striped, _) = synth_stripes(&cube, &cfg).unwrap();
        assert_eq!(striped.values(), cube.values());
    }

    #[test]
    fn off_mask_voxels_are_bit_identical() {
        let cube = test_cube(20, 20, 3, 9);
        let cfg = StripeConfig::new(12);
        let (striped, realization) = synth_stripes(&cube, &cfg).unwrap();
        let masked: std::collections::HashSet<usize> =
            realization.field.iter().map(|(i, _)| *i).collect();
        for (flat, (&a, &b)) in cube.values().iter().zip(striped.values()).enumerate() {
            if !masked.contains(&flat) {
                assert_eq!(a.to_bits(), b.to_bits(), "off-mask voxel {flat} changed");
            }
        }
        assert!(!masked.is_empty());
    }

    #[test]
    fn masked_residual_std_matches_model() {
        // One band, large plane so a single realization has >= 1e4 masked voxels.
        let cube = test_cube(300, 80, 1, 10);
        let mut cfg = StripeConfig::new(13);
        cfg.stripe_frequency = 0.6;
        cfg.min_fragment_len = 0.5;
        cfg.max_fragment_len = 1.0;
        cfg.fragments_min = 1;
        cfg.fragments_max = 2;
        let (striped, realization) = synth_stripes(&cube, &cfg).unwrap();
        let band = &realization.bands[0];
        let range = dynamic_range(&cube, 0).unwrap();
        let expected = cfg.sigma * range * band.factor;

        let residuals: Vec<f64> = realization
            .field
            .iter()
            .map(|&(flat, _)| striped.values()[flat] as f64 - cube.values()[flat] as f64)
            .collect();
        assert!(residuals.len() >= 10_000, "only {} masked voxels", residuals.len());
        let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
        let var = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>()
            / residuals.len() as f64;
        let std = var.sqrt();
        assert!(
            (std - expected).abs() / expected < 0.05,
            "std {std} vs expected {expected}"
        );

        // Normality: skew and excess kurtosis near zero.
        let m3 = residuals.iter().map(|r| (r - mean).powi(3)).sum::<f64>()
            / residuals.len() as f64;
        let m4 = residuals.iter().map(|r| (r - mean).powi(4)).sum::<f64>()
            / residuals.len() as f64;
        let skew = m3 / var.powf(1.5);
        let kurt = m4 / (var * var) - 3.0;
        assert!(skew.abs() < 0.2, "skew {skew}");
        assert!(kurt.abs() < 0.2, "kurtosis {kurt}");
    }

    #[test]
    fn synthesis_is_deterministic() {
        let cube = test_cube(24, 24, 6, 14);
        let cfg = StripeConfig::new(15);
        let (s1, r1) = synth_stripes(&cube, &cfg).unwrap();
        let (s2, r2) = synth_stripes(&cube, &cfg).unwrap();
        assert_eq!(s1.values(), s2.values());
        assert_eq!(r1.field, r2.field);
    }

    #[test]
    fn manifest_band_count_and_round_trip() {
        let cube = test_cube(16, 16, 5, 16);
        let cfg = StripeConfig::new(17);
        let (_, realization) = synth_stripes(&cube, &cfg).unwrap();
        let manifest = build_pair_manifest(
            Path::new("clean.hdr"),
            Path::new("striped.hdr"),
            &realization,
        );
        assert_eq!(manifest.bands.len(), 5);
        let json = serde_json::to_string_pretty(&manifest).unwrap();
        let parsed: PairManifest = serde_json::from_str(&json).unwrap();
        let rejson = serde_json::to_string_pretty(&parsed).unwrap();
        assert_eq!(json, rejson);
        assert_eq!(parsed, manifest);
    }

    #[test]
    fn manifest_config_reproduces_striped_cube() {
        let cube = test_cube(20, 18, 4, 18);
        let cfg = StripeConfig::new(19);
        let (striped, realization) = synth_stripes(&cube, &cfg).unwrap();
        let manifest = build_pair_manifest(
            Path::new("clean.hdr"),
            Path::new("striped.hdr"),
            &realization,
        );
        let (again, _) = synth_stripes(&cube, &manifest.config).unwrap();
        assert_eq!(striped.values(), again.values());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = StripeConfig::new(0);
        cfg.stripe_frequency = 1.2;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = StripeConfig::new(0);
        cfg.sigma = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = StripeConfig::new(0);
        cfg.fragments_min = 3;
        cfg.fragments_max = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = StripeConfig::new(0);
        cfg.min_fragment_len = 0.0;
        assert!(cfg.validate().is_err());
    }
}
