//! Hyperspectral cube representation, ENVI-style I/O, normalization,
//! patch sampling and reassembly.
//!
//! The canonical in-memory order is `(line, sample, band)` with band the
//! fastest axis, regardless of the interleave a file was stored in. All
//! math modules assume this order; a pixel's spectrum is contiguous.

mod envi;

pub use envi::{canonicalize, from_canonical, load_envi, save_envi};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Storage layout of an ENVI raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interleave {
    /// Band sequential: `[band][line][sample]`.
    Bsq,
    /// Band interleaved by line: `[line][band][sample]`.
    Bil,
    /// Band interleaved by pixel: `[line][sample][band]`.
    Bip,
}

impl Interleave {
    pub fn as_str(&self) -> &'static str {
        match self {
            Interleave::Bsq => "bsq",
            Interleave::Bil => "bil",
            Interleave::Bip => "bip",
        }
    }

    pub fn parse(s: &str) -> Option<Interleave> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bsq" => Some(Interleave::Bsq),
            "bil" => Some(Interleave::Bil),
            "bip" => Some(Interleave::Bip),
            _ => None,
        }
    }
}

/// A dense 3D radiance array with layout metadata. Immutable after
/// construction; safe to share across threads.
#[derive(Debug, Clone)]
pub struct HyperCube {
    pub lines: usize,
    pub samples: usize,
    pub bands: usize,
    values: Vec<f32>,
    pub wavelengths: Option<Vec<f64>>,
    pub interleave: Interleave,
    pub id: String,
}

impl HyperCube {
    /// Build a cube from canonical-order values, checking every invariant.
    pub fn new(
        lines: usize,
        samples: usize,
        bands: usize,
        values: Vec<f32>,
        wavelengths: Option<Vec<f64>>,
        interleave: Interleave,
    ) -> Result<Self> {
        if lines == 0 || samples == 0 || bands == 0 {
            return Err(Error::Dimension(format!(
                "cube dimensions must be >= 1, got {lines}x{samples}x{bands}"
            )));
        }
        let expected = lines * samples * bands;
        if values.len() != expected {
            return Err(Error::Dimension(format!(
                "value count {} does not match {lines}x{samples}x{bands} = {expected}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "cube value at flat index {pos} is not finite"
            )));
        }
        if let Some(w) = &wavelengths {
            if w.len() != bands {
                return Err(Error::Dimension(format!(
                    "wavelength list length {} != bands {bands}",
                    w.len()
                )));
            }
            if w.windows(2).any(|p| p[1] <= p[0]) {
                return Err(Error::Config(
                    "wavelengths must be strictly increasing".into(),
                ));
            }
        }
        Ok(HyperCube {
            lines,
            samples,
            bands,
            values,
            wavelengths,
            interleave,
            id: String::new(),
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    #[inline]
    pub fn index(&self, line: usize, sample: usize, band: usize) -> usize {
        (line * self.samples + sample) * self.bands + band
    }

    #[inline]
    pub fn get(&self, line: usize, sample: usize, band: usize) -> f32 {
        self.values[self.index(line, sample, band)]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.lines, self.samples, self.bands)
    }

    pub fn same_shape(&self, other: &HyperCube) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "cube shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Copy of one band's spatial plane in (line, sample) order.
    pub fn band_plane(&self, band: usize) -> Result<Vec<f32>> {
        if band >= self.bands {
            return Err(Error::Index(format!(
                "band {band} out of range (bands = {})",
                self.bands
            )));
        }
        let mut plane = Vec::with_capacity(self.lines * self.samples);
        for line in 0..self.lines {
            for sample in 0..self.samples {
                plane.push(self.get(line, sample, band));
            }
        }
        Ok(plane)
    }
}

/// Location of a cubic patch inside a parent cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchIndex {
    pub line0: usize,
    pub sample0: usize,
    pub band0: usize,
    pub extent: usize,
}

impl PatchIndex {
    pub fn fits(&self, lines: usize, samples: usize, bands: usize) -> bool {
        self.line0 + self.extent <= lines
            && self.sample0 + self.extent <= samples
            && self.band0 + self.extent <= bands
    }
}

/// A cubic patch cut from a parent cube, in (line, sample, band) order.
#[derive(Debug, Clone)]
pub struct CubePatch {
    pub index: PatchIndex,
    pub values: Vec<f32>,
    pub source_id: String,
}

impl CubePatch {
    pub fn new(index: PatchIndex, values: Vec<f32>, source_id: impl Into<String>) -> Result<Self> {
        let expected = index.extent * index.extent * index.extent;
        if values.len() != expected {
            return Err(Error::Dimension(format!(
                "patch value count {} != extent^3 = {expected}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("patch contains non-finite values".into()));
        }
        Ok(CubePatch {
            index,
            values,
            source_id: source_id.into(),
        })
    }

    pub fn extent(&self) -> usize {
        self.index.extent
    }

    /// Patch values widened to f64 (math modules run in 64-bit).
    pub fn values_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Per-band affine range used by [`normalize`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BandRange {
    pub min: f32,
    pub max: f32,
    /// Constant band: mapped to all-zeros, restored to `min`.
    pub degenerate: bool,
}

/// Inverse map for [`normalize`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub bands: Vec<BandRange>,
}

impl NormalizationRecord {
    /// Exact inverse of [`normalize`] for non-constant bands; constant
    /// bands are restored to their original value.
    pub fn denormalize(&self, cube: &HyperCube) -> Result<HyperCube> {
        if self.bands.len() != cube.bands {
            return Err(Error::Dimension(format!(
                "record has {} bands, cube has {}",
                self.bands.len(),
                cube.bands
            )));
        }
        let mut out = cube.values().to_vec();
        for line in 0..cube.lines {
            for sample in 0..cube.samples {
                let base = cube.index(line, sample, 0);
                for (band, r) in self.bands.iter().enumerate() {
                    let v = out[base + band] as f64;
                    out[base + band] = if r.degenerate {
                        r.min
                    } else {
                        (v * (r.max as f64 - r.min as f64) + r.min as f64) as f32
                    };
                }
            }
        }
        HyperCube::new(
            cube.lines,
            cube.samples,
            cube.bands,
            out,
            cube.wavelengths.clone(),
            cube.interleave,
        )
        .map(|c| c.with_id(cube.id.clone()))
    }
}

/// Map each band independently onto [0, 1]. Constant bands become
/// all-zeros and are flagged degenerate in the returned record.
pub fn normalize(cube: &HyperCube) -> (HyperCube, NormalizationRecord) {
    let mut ranges = Vec::with_capacity(cube.bands);
    for band in 0..cube.bands {
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for line in 0..cube.lines {
            for sample in 0..cube.samples {
                let v = cube.get(line, sample, band);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        ranges.push(BandRange {
            min: lo,
            max: hi,
            degenerate: lo == hi,
        });
    }
    let mut out = cube.values().to_vec();
    for line in 0..cube.lines {
        for sample in 0..cube.samples {
            let base = cube.index(line, sample, 0);
            for (band, r) in ranges.iter().enumerate() {
                out[base + band] = if r.degenerate {
                    0.0
                } else {
                    ((out[base + band] as f64 - r.min as f64) / (r.max as f64 - r.min as f64))
                        as f32
                };
            }
        }
    }
    let normalized = HyperCube {
        lines: cube.lines,
        samples: cube.samples,
        bands: cube.bands,
        values: out,
        wavelengths: cube.wavelengths.clone(),
        interleave: cube.interleave,
        id: cube.id.clone(),
    };
    (normalized, NormalizationRecord { bands: ranges })
}

/// Max minus min over one band's spatial plane.
pub fn dynamic_range(cube: &HyperCube, band: usize) -> Result<f64> {
    if band >= cube.bands {
        return Err(Error::Index(format!(
            "band {band} out of range (bands = {})",
            cube.bands
        )));
    }
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for line in 0..cube.lines {
        for sample in 0..cube.samples {
            let v = cube.get(line, sample, band);
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    Ok(hi as f64 - lo as f64)
}

/// Cut the patch at `index` out of `cube`.
pub fn extract_patch(cube: &HyperCube, index: PatchIndex) -> Result<CubePatch> {
    if !index.fits(cube.lines, cube.samples, cube.bands) {
        return Err(Error::Dimension(format!(
            "patch {index:?} does not fit cube {:?}",
            cube.shape()
        )));
    }
    let e = index.extent;
    let mut values = Vec::with_capacity(e * e * e);
    for dl in 0..e {
        for ds in 0..e {
            for db in 0..e {
                values.push(cube.get(index.line0 + dl, index.sample0 + ds, index.band0 + db));
            }
        }
    }
    CubePatch::new(index, values, cube.id.clone())
}

/// Draw `n` patch start offsets uniformly over the valid range, from a
/// deterministic per-patch substream of `seed`. Duplicates are allowed.
pub fn sample_patches(
    cube: &HyperCube,
    n: usize,
    extent: usize,
    seed: u64,
) -> Result<Vec<CubePatch>> {
    if n == 0 {
        return Err(Error::Config("patch count must be >= 1".into()));
    }
    if extent == 0 || extent > cube.lines || extent > cube.samples || extent > cube.bands {
        return Err(Error::Dimension(format!(
            "extent {extent} exceeds cube dimensions {:?}",
            cube.shape()
        )));
    }
    let root = Stream::new(seed);
    let mut patches = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = root.fork(i as u64);
        let index = PatchIndex {
            line0: s.uniform_usize(cube.lines - extent + 1),
            sample0: s.uniform_usize(cube.samples - extent + 1),
            band0: s.uniform_usize(cube.bands - extent + 1),
            extent,
        };
        patches.push(extract_patch(cube, index)?);
    }
    Ok(patches)
}

/// Recombine patches into a full cube, averaging overlaps with equal
/// weight. Every voxel must be covered by at least one patch.
pub fn reassemble(
    patches: &[(PatchIndex, Vec<f32>)],
    lines: usize,
    samples: usize,
    bands: usize,
) -> Result<HyperCube> {
    let total = lines * samples * bands;
    let mut sums = vec![0.0f64; total];
    let mut counts = vec![0u32; total];
    for (index, values) in patches {
        let e = index.extent;
        if values.len() != e * e * e {
            return Err(Error::Dimension(format!(
                "patch values length {} != extent^3 = {}",
                values.len(),
                e * e * e
            )));
        }
        if !index.fits(lines, samples, bands) {
            return Err(Error::Dimension(format!(
                "patch {index:?} does not fit target {lines}x{samples}x{bands}"
            )));
        }
        let mut k = 0;
        for dl in 0..e {
            for ds in 0..e {
                for db in 0..e {
                    let flat = ((index.line0 + dl) * samples + index.sample0 + ds) * bands
                        + index.band0
                        + db;
                    sums[flat] += values[k] as f64;
                    counts[flat] += 1;
                    k += 1;
                }
            }
        }
    }
    if let Some(flat) = counts.iter().position(|&c| c == 0) {
        let line = flat / (samples * bands);
        let sample = (flat / bands) % samples;
        let band = flat % bands;
        return Err(Error::Coverage { line, sample, band });
    }
    let values: Vec<f32> = sums
        .iter()
        .zip(counts.iter())
        .map(|(&s, &c)| (s / c as f64) as f32)
        .collect();
    HyperCube::new(lines, samples, bands, values, None, Interleave::Bsq)
}

/// Procedural test scene: a handful of spatial Gaussian blobs, each with
/// a smooth Gaussian spectral bump, plus a gentle background ramp. Values
/// land in [0, 1]. Deterministic in `seed`.
pub fn gaussian_bump_cube(lines: usize, samples: usize, bands: usize, seed: u64) -> HyperCube {
    let mut s = Stream::new(seed).fork(0x6375_6265);
    let n_blobs = 4 + s.uniform_usize(3);
    struct Blob {
        lc: f64,
        sc: f64,
        bc: f64,
        spatial_sigma: f64,
        spectral_sigma: f64,
        amplitude: f64,
    }
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            lc: s.uniform(0.0, lines as f64),
            sc: s.uniform(0.0, samples as f64),
            bc: s.uniform(0.0, bands as f64),
            spatial_sigma: s.uniform(0.08, 0.25) * lines.max(samples) as f64,
            spectral_sigma: s.uniform(0.1, 0.3) * bands as f64,
            amplitude: s.uniform(0.3, 1.0),
        })
        .collect();
    let mut values = Vec::with_capacity(lines * samples * bands);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for line in 0..lines {
        for sample in 0..samples {
            for band in 0..bands {
                let ramp = 0.1
                    + 0.05 * (line as f64 / lines as f64)
                    + 0.05 * (band as f64 / bands as f64);
                let mut v = ramp;
                for blob in &blobs {
                    let d2 = (line as f64 - blob.lc).powi(2) + (sample as f64 - blob.sc).powi(2);
                    let spatial = (-d2 / (2.0 * blob.spatial_sigma.powi(2))).exp();
                    let spectral = (-(band as f64 - blob.bc).powi(2)
                        / (2.0 * blob.spectral_sigma.powi(2)))
                    .exp();
                    v += blob.amplitude * spatial * spectral;
                }
                lo = lo.min(v);
                hi = hi.max(v);
                values.push(v);
            }
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let values: Vec<f32> = values.iter().map(|&v| ((v - lo) / span) as f32).collect();
    HyperCube::new(lines, samples, bands, values, None, Interleave::Bsq)
        .expect("procedural cube is valid by construction")
        .with_id(format!("gaussian-bump-{seed}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_cube(lines: usize, samples: usize, bands: usize, seed: u64) -> HyperCube {
        let mut s = Stream::new(seed);
        let values: Vec<f32> = (0..lines * samples * bands)
            .map(|_| s.uniform(-2.0, 5.0) as f32)
            .collect();
        HyperCube::new(lines, samples, bands, values, None, Interleave::Bsq).unwrap()
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(HyperCube::new(0, 1, 1, vec![], None, Interleave::Bsq).is_err());
        assert!(HyperCube::new(2, 2, 2, vec![0.0; 7], None, Interleave::Bsq).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let err = HyperCube::new(1, 1, 2, vec![1.0, f32::NAN], None, Interleave::Bsq);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn rejects_non_increasing_wavelengths() {
        let err = HyperCube::new(
            1,
            1,
            2,
            vec![1.0, 2.0],
            Some(vec![500.0, 500.0]),
            Interleave::Bsq,
        );
        assert!(err.is_err());
    }

    #[test]
    fn normalize_maps_band_to_unit_interval() {
        let cube = HyperCube::new(1, 2, 1, vec![2.0, 4.0], None, Interleave::Bsq).unwrap();
        let (norm, rec) = normalize(&cube);
        assert_eq!(norm.values(), &[0.0, 1.0]);
        assert_eq!(rec.bands[0].min, 2.0);
        assert_eq!(rec.bands[0].max, 4.0);
        assert!(!rec.bands[0].degenerate);
    }

    #[test]
    fn normalize_constant_band_is_flagged() {
        let cube = HyperCube::new(1, 2, 1, vec![5.0, 5.0], None, Interleave::Bsq).unwrap();
        let (norm, rec) = normalize(&cube);
        assert_eq!(norm.values(), &[0.0, 0.0]);
        assert!(rec.bands[0].degenerate);
        let back = rec.denormalize(&norm).unwrap();
        assert_eq!(back.values(), &[5.0, 5.0]);
    }

    #[test]
    fn denormalize_inverts_within_tolerance() {
        let cube = small_cube(4, 5, 3, 11);
        let (norm, rec) = normalize(&cube);
        let back = rec.denormalize(&norm).unwrap();
        for (a, b) in cube.values().iter().zip(back.values()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn normalize_is_idempotent_on_unit_bands() {
        let cube = small_cube(6, 6, 2, 3);
        let (once, _) = normalize(&cube);
        let (twice, _) = normalize(&once);
        for (a, b) in once.values().iter().zip(twice.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn dynamic_range_matches_scan() {
        let cube = HyperCube::new(1, 3, 1, vec![0.1, 0.9, 0.5], None, Interleave::Bsq).unwrap();
        let r = dynamic_range(&cube, 0).unwrap();
        assert!((r - 0.8).abs() < 1e-7);
        assert!(dynamic_range(&cube, 1).is_err());
    }

    #[test]
    fn dynamic_range_constant_band_is_zero() {
        let cube = HyperCube::new(2, 2, 1, vec![3.0; 4], None, Interleave::Bsq).unwrap();
        assert_eq!(dynamic_range(&cube, 0).unwrap(), 0.0);
    }

    #[test]
    fn dynamic_range_random_band_equals_brute_force() {
        let cube = small_cube(8, 8, 2, 17);
        let plane = cube.band_plane(1).unwrap();
        let lo = plane.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = plane.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(dynamic_range(&cube, 1).unwrap(), hi as f64 - lo as f64);
    }

    #[test]
    fn sample_patches_single_position() {
        let cube = small_cube(4, 4, 4, 1);
        for seed in [0u64, 9, 77] {
            let p = sample_patches(&cube, 3, 4, seed).unwrap();
            for patch in &p {
                assert_eq!(
                    patch.index,
                    PatchIndex {
                        line0: 0,
                        sample0: 0,
                        band0: 0,
                        extent: 4
                    }
                );
            }
        }
    }

    #[test]
    fn sample_patches_bounds_and_determinism() {
        let cube = small_cube(12, 10, 9, 5);
        let a = sample_patches(&cube, 40, 4, 99).unwrap();
        let b = sample_patches(&cube, 40, 4, 99).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.index, pb.index);
            assert_eq!(pa.values, pb.values);
            assert!(pa.index.fits(12, 10, 9));
        }
        assert!(sample_patches(&cube, 1, 13, 0).is_err());
    }

    #[test]
    fn reassemble_identity_and_mean() {
        let cube = small_cube(4, 4, 4, 2);
        let patch = extract_patch(
            &cube,
            PatchIndex {
                line0: 0,
                sample0: 0,
                band0: 0,
                extent: 4,
            },
        )
        .unwrap();
        // One covering patch: identity.
        let out = reassemble(&[(patch.index, patch.values.clone())], 4, 4, 4).unwrap();
        assert_eq!(out.values(), cube.values());
        // Two identical overlapping patches: still identity.
        let out2 = reassemble(
            &[
                (patch.index, patch.values.clone()),
                (patch.index, patch.values.clone()),
            ],
            4,
            4,
            4,
        )
        .unwrap();
        assert_eq!(out2.values(), cube.values());
    }

    #[test]
    fn reassemble_averages_overlap() {
        let idx_a = PatchIndex {
            line0: 0,
            sample0: 0,
            band0: 0,
            extent: 2,
        };
        let idx_b = PatchIndex {
            line0: 1,
            sample0: 0,
            band0: 0,
            extent: 2,
        };
        let out = reassemble(&[(idx_a, vec![0.0; 8]), (idx_b, vec![1.0; 8])], 3, 2, 2).unwrap();
        // Line 1 is covered by both patches with values 0 and 1.
        for sample in 0..2 {
            for band in 0..2 {
                assert_eq!(out.get(0, sample, band), 0.0);
                assert_eq!(out.get(1, sample, band), 0.5);
                assert_eq!(out.get(2, sample, band), 1.0);
            }
        }
    }

    #[test]
    fn reassemble_reports_uncovered_voxel() {
        let idx = PatchIndex {
            line0: 0,
            sample0: 0,
            band0: 0,
            extent: 1,
        };
        let err = reassemble(&[(idx, vec![1.0])], 2, 1, 1);
        match err {
            Err(Error::Coverage { line, sample, band }) => {
                assert_eq!((line, sample, band), (1, 0, 0));
            }
            other => panic!("expected coverage error, got {other:?}"),
        }
    }

    #[test]
    fn gaussian_bump_cube_is_unit_range() {
        let cube = gaussian_bump_cube(16, 16, 8, 42);
        let lo = cube.values().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = cube
            .values()
            .iter()
            .cloned()
            .fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
        let again = gaussian_bump_cube(16, 16, 8, 42);
        assert_eq!(cube.values(), again.values());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn reassemble_of_partition_is_exact(seed in 0u64..1000) {
            let cube = small_cube(6, 6, 4, seed);
            let mut parts = Vec::new();
            for l0 in (0..6).step_by(2) {
                for s0 in (0..6).step_by(2) {
                    for b0 in (0..4).step_by(2) {
                        let idx = PatchIndex { line0: l0, sample0: s0, band0: b0, extent: 2 };
                        let p = extract_patch(&cube, idx).unwrap();
                        parts.push((idx, p.values));
                    }
                }
            }
            let out = reassemble(&parts, 6, 6, 4).unwrap();
            prop_assert_eq!(out.values(), cube.values());
        }

        #[test]
        fn patch_containment_holds(seed in 0u64..5000, extent in 1usize..5) {
            let cube = small_cube(8, 7, 6, 123);
            let patches = sample_patches(&cube, 16, extent, seed).unwrap();
            for p in patches {
                prop_assert!(p.index.fits(8, 7, 6));
                prop_assert_eq!(p.values.len(), extent * extent * extent);
            }
        }
    }
}
