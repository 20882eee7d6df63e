//! ENVI-style header/raw pair reader and writer.
//!
//! The header is ASCII `key = value` lines (an optional leading `ENVI`
//! magic line is tolerated); the companion file is raw little-endian
//! binary. Accepted data types: 4 (float32) and 12 (uint16, promoted to
//! float unchanged). Writing always emits data type 4, byte order 0.

use std::fs;
use std::path::{Path, PathBuf};

use super::{HyperCube, Interleave};
use crate::error::{Error, Result};
use crate::util::write_atomic;

/// Reorder raw interleaved values into canonical (line, sample, band).
pub fn canonicalize(
    interleave: Interleave,
    lines: usize,
    samples: usize,
    bands: usize,
    raw: &[f32],
) -> Vec<f32> {
    let mut out = vec![0.0f32; raw.len()];
    for line in 0..lines {
        for sample in 0..samples {
            for band in 0..bands {
                let src = match interleave {
                    Interleave::Bsq => (band * lines + line) * samples + sample,
                    Interleave::Bil => (line * bands + band) * samples + sample,
                    Interleave::Bip => (line * samples + sample) * bands + band,
                };
                out[(line * samples + sample) * bands + band] = raw[src];
            }
        }
    }
    out
}

/// Reorder canonical values into the requested storage interleave.
pub fn from_canonical(
    interleave: Interleave,
    lines: usize,
    samples: usize,
    bands: usize,
    canonical: &[f32],
) -> Vec<f32> {
    let mut out = vec![0.0f32; canonical.len()];
    for line in 0..lines {
        for sample in 0..samples {
            for band in 0..bands {
                let dst = match interleave {
                    Interleave::Bsq => (band * lines + line) * samples + sample,
                    Interleave::Bil => (line * bands + band) * samples + sample,
                    Interleave::Bip => (line * samples + sample) * bands + band,
                };
                out[dst] = canonical[(line * samples + sample) * bands + band];
            }
        }
    }
    out
}

struct Header {
    samples: usize,
    lines: usize,
    bands: usize,
    interleave: Interleave,
    data_type: u8,
    wavelengths: Option<Vec<f64>>,
}

fn parse_header(path: &Path, text: &str) -> Result<Header> {
    let mut fields: Vec<(String, String)> = Vec::new();
    let mut lines_iter = text.lines().peekable();
    while let Some(line) = lines_iter.next() {
        let line = line.trim();
        if line.is_empty() || line.eq_ignore_ascii_case("envi") {
            continue;
        }
        let Some(eq) = line.find('=') else { continue };
        let key = line[..eq].trim().to_ascii_lowercase();
        let mut value = line[eq + 1..].trim().to_string();
        // Brace values ("wavelength = { ... }") may span multiple lines.
        if value.starts_with('{') && !value.contains('}') {
            for cont in lines_iter.by_ref() {
                value.push(' ');
                value.push_str(cont.trim());
                if cont.contains('}') {
                    break;
                }
            }
        }
        fields.push((key, value));
    }
    let get = |key: &str| -> Option<&str> {
        fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    };
    let need = |key: &str| -> Result<&str> {
        get(key).ok_or_else(|| Error::format(path, format!("missing header key `{key}`")))
    };
    let parse_count = |key: &str| -> Result<usize> {
        need(key)?
            .parse::<usize>()
            .map_err(|_| Error::format(path, format!("garbled header key `{key}`")))
    };

    let samples = parse_count("samples")?;
    let lines = parse_count("lines")?;
    let bands = parse_count("bands")?;
    let interleave = Interleave::parse(need("interleave")?).ok_or_else(|| {
        Error::format(
            path,
            format!("garbled header key `interleave` (got `{}`)",
                get("interleave").unwrap_or_default()),
        )
    })?;
    let data_type: u8 = need("data type")?
        .parse()
        .map_err(|_| Error::format(path, "garbled header key `data type`"))?;
    if data_type != 4 && data_type != 12 {
        return Err(Error::Unsupported {
            what: "data type".into(),
            value: data_type.to_string(),
        });
    }
    if let Some(order) = get("byte order") {
        if order.trim() != "0" {
            return Err(Error::Unsupported {
                what: "byte order".into(),
                value: order.trim().to_string(),
            });
        }
    }
    let wavelengths = match get("wavelength") {
        Some(v) => {
            let inner = v.trim().trim_start_matches('{').trim_end_matches('}');
            let parsed: std::result::Result<Vec<f64>, _> = inner
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::parse::<f64>)
                .collect();
            Some(parsed.map_err(|_| Error::format(path, "garbled header key `wavelength`"))?)
        }
        None => None,
    };
    Ok(Header {
        samples,
        lines,
        bands,
        interleave,
        data_type,
        wavelengths,
    })
}

/// Locate the raw companion of a header file.
fn data_path_for(header_path: &Path) -> Result<PathBuf> {
    let mut candidates = Vec::new();
    if header_path.extension().is_some_and(|e| e == "hdr") {
        candidates.push(header_path.with_extension(""));
        for ext in ["raw", "img", "dat", "bsq", "bil", "bip"] {
            candidates.push(header_path.with_extension(ext));
        }
    }
    candidates
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| Error::format(header_path, "no raw companion file found"))
}

/// Load a header/raw pair into a canonically ordered cube.
pub fn load_envi(header_path: &Path) -> Result<HyperCube> {
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header = parse_header(header_path, &text)?;
    let data_path = data_path_for(header_path)?;
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;

    let voxels = header.lines * header.samples * header.bands;
    let elem = if header.data_type == 4 { 4 } else { 2 };
    let expected = (voxels * elem) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: data_path,
            expected,
            found: bytes.len() as u64,
        });
    }

    let raw: Vec<f32> = match header.data_type {
        4 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        12 => bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        _ => unreachable!("validated in parse_header"),
    };
    let canonical = canonicalize(
        header.interleave,
        header.lines,
        header.samples,
        header.bands,
        &raw,
    );
    let id = header_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    HyperCube::new(
        header.lines,
        header.samples,
        header.bands,
        canonical,
        header.wavelengths,
        header.interleave,
    )
    .map(|c| c.with_id(id))
}

/// Write `cube` as a text header plus raw little-endian float32 binary in
/// the requested interleave. The raw file sits next to the header with a
/// `.raw` extension.
pub fn save_envi(cube: &HyperCube, header_path: &Path, interleave: Interleave) -> Result<()> {
    let mut header = String::new();
    header.push_str("ENVI\n");
    header.push_str(&format!("samples = {}\n", cube.samples));
    header.push_str(&format!("lines = {}\n", cube.lines));
    header.push_str(&format!("bands = {}\n", cube.bands));
    header.push_str("data type = 4\n");
    header.push_str(&format!("interleave = {}\n", interleave.as_str()));
    header.push_str("byte order = 0\n");
    if let Some(w) = &cube.wavelengths {
        let list: Vec<String> = w.iter().map(|x| format!("{x}")).collect();
        header.push_str(&format!("wavelength = {{ {} }}\n", list.join(", ")));
    }
    write_atomic(header_path, header.as_bytes())?;

    let stored = from_canonical(interleave, cube.lines, cube.samples, cube.bands, cube.values());
    let mut bytes = Vec::with_capacity(stored.len() * 4);
    for v in stored {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(&header_path.with_extension("raw"), &bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_pair(dir: &Path, name: &str, header: &str, data: &[u8]) -> PathBuf {
        let hdr = dir.join(format!("{name}.hdr"));
        fs::write(&hdr, header).unwrap();
        fs::write(dir.join(format!("{name}.raw")), data).unwrap();
        hdr
    }

    #[test]
    fn decodes_small_bsq_float() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            data.extend_from_slice(&v.to_le_bytes());
        }
        let hdr = write_pair(
            dir.path(),
            "t",
            "ENVI\nsamples = 2\nlines = 2\nbands = 1\ninterleave = bsq\ndata type = 4\nbyte order = 0\n",
            &data,
        );
        let cube = load_envi(&hdr).unwrap();
        assert_eq!(cube.shape(), (2, 2, 1));
        assert_eq!(cube.values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn uint16_is_promoted_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = Vec::new();
        for v in [0u16, 7, 65535] {
            data.extend_from_slice(&v.to_le_bytes());
        }
        let hdr = write_pair(
            dir.path(),
            "u",
            "samples = 3\nlines = 1\nbands = 1\ninterleave = bip\ndata type = 12\n",
            &data,
        );
        let cube = load_envi(&hdr).unwrap();
        assert_eq!(cube.values(), &[0.0, 7.0, 65535.0]);
    }

    #[test]
    fn single_voxel_binary_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let cube = HyperCube::new(1, 1, 1, vec![7.0], None, Interleave::Bsq).unwrap();
        let hdr = dir.path().join("one.hdr");
        save_envi(&cube, &hdr, Interleave::Bsq).unwrap();
        let raw = fs::read(dir.path().join("one.raw")).unwrap();
        assert_eq!(raw, vec![0x00, 0x00, 0xE0, 0x40]);
    }

    #[test]
    fn missing_key_names_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let hdr = write_pair(
            dir.path(),
            "m",
            "samples = 2\nlines = 2\ninterleave = bsq\ndata type = 4\n",
            &[0u8; 16],
        );
        match load_envi(&hdr) {
            Err(Error::Format { detail, .. }) => assert!(detail.contains("bands"), "{detail}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn size_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let hdr = write_pair(
            dir.path(),
            "s",
            "samples = 2\nlines = 2\nbands = 1\ninterleave = bsq\ndata type = 4\n",
            &[0u8; 12],
        );
        assert!(matches!(load_envi(&hdr), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn unsupported_data_type_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let hdr = write_pair(
            dir.path(),
            "d",
            "samples = 1\nlines = 1\nbands = 1\ninterleave = bsq\ndata type = 5\n",
            &[0u8; 8],
        );
        assert!(matches!(load_envi(&hdr), Err(Error::Unsupported { .. })));
    }

    #[test]
    fn bip_and_bsq_agree_after_canonicalization() {
        // 2x2 spatial, 3 bands. Both layouts are laid out here by
        // explicit triple loops, independent of the production
        // conversion code.
        let (lines, samples, bands) = (2usize, 2usize, 3usize);
        let value = |l: usize, s: usize, b: usize| (l * 100 + s * 10 + b) as f32;
        let mut bsq = vec![0.0f32; lines * samples * bands];
        let mut bip = vec![0.0f32; lines * samples * bands];
        for l in 0..lines {
            for s in 0..samples {
                for b in 0..bands {
                    bsq[(b * lines + l) * samples + s] = value(l, s, b);
                    bip[(l * samples + s) * bands + b] = value(l, s, b);
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let mut cubes = Vec::new();
        for (name, stored) in [("bsq", &bsq), ("bip", &bip)] {
            let mut data = Vec::new();
            for v in stored.iter() {
                data.extend_from_slice(&v.to_le_bytes());
            }
            let hdr = write_pair(
                dir.path(),
                name,
                &format!(
                    "samples = {samples}\nlines = {lines}\nbands = {bands}\ninterleave = {name}\ndata type = 4\n"
                ),
                &data,
            );
            cubes.push(load_envi(&hdr).unwrap());
        }
        assert_eq!(cubes[0].values(), cubes[1].values());
        for l in 0..lines {
            for s in 0..samples {
                for b in 0..bands {
                    assert_eq!(cubes[0].get(l, s, b), value(l, s, b));
                }
            }
        }
    }

    #[test]
    fn wavelengths_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cube = HyperCube::new(
            1,
            1,
            3,
            vec![1.0, 2.0, 3.0],
            Some(vec![450.5, 550.0, 650.25]),
            Interleave::Bsq,
        )
        .unwrap();
        let hdr = dir.path().join("w.hdr");
        save_envi(&cube, &hdr, Interleave::Bil).unwrap();
        let back = load_envi(&hdr).unwrap();
        assert_eq!(back.wavelengths, Some(vec![450.5, 550.0, 650.25]));
        assert_eq!(back.values(), cube.values());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn interleave_conversion_is_a_bijection(
            lines in 1usize..5,
            samples in 1usize..5,
            bands in 1usize..5,
            seed in 0u64..10_000,
        ) {
            let mut s = crate::rng::Stream::new(seed);
            let canonical: Vec<f32> =
                (0..lines * samples * bands).map(|_| s.uniform(-1.0, 1.0) as f32).collect();
            for layout in [Interleave::Bsq, Interleave::Bil, Interleave::Bip] {
                let stored = from_canonical(layout, lines, samples, bands, &canonical);
                let back = canonicalize(layout, lines, samples, bands, &stored);
                prop_assert_eq!(&back, &canonical);
            }
        }

        #[test]
        fn save_load_round_trip_bit_identical(
            lines in 1usize..4,
            samples in 1usize..4,
            bands in 1usize..4,
            seed in 0u64..10_000,
        ) {
            let mut s = crate::rng::Stream::new(seed);
            let values: Vec<f32> =
                (0..lines * samples * bands).map(|_| s.uniform(-10.0, 10.0) as f32).collect();
            let cube = HyperCube::new(lines, samples, bands, values, None, Interleave::Bsq).unwrap();
            let dir = tempfile::tempdir().unwrap();
            for layout in [Interleave::Bsq, Interleave::Bil, Interleave::Bip] {
                let hdr = dir.path().join(format!("{}.hdr", layout.as_str()));
                save_envi(&cube, &hdr, layout).unwrap();
                let back = load_envi(&hdr).unwrap();
                prop_assert_eq!(back.values(), cube.values());
                // Saving the loaded cube again reproduces identical binary.
                let hdr2 = dir.path().join(format!("{}_2.hdr", layout.as_str()));
                save_envi(&back, &hdr2, layout).unwrap();
                let raw1 = fs::read(hdr.with_extension("raw")).unwrap();
                let raw2 = fs::read(hdr2.with_extension("raw")).unwrap();
                prop_assert_eq!(raw1, raw2);
            }
        }
    }
}
