//! Write and read ENVI header/raw pairs in all three interleaves and
//! confirm the values survive bit-exactly.
//!
//! Run with: cargo run --release --example envi_roundtrip

use hsidiff::datacube::{gaussian_bump_cube, load_envi, save_envi, Interleave};

fn main() -> hsidiff::Result<()> {
    let dir = std::env::temp_dir().join("hsidiff-envi-example");
    std::fs::create_dir_all(&dir).expect("create dir");

    let cube = gaussian_bump_cube(24, 20, 12, 3);
    for interleave in [Interleave::Bsq, Interleave::Bil, Interleave::Bip] {
        let hdr = dir.join(format!("scene_{}.hdr", interleave.as_str()));
        save_envi(&cube, &hdr, interleave)?;
        let back = load_envi(&hdr)?;
        let identical = cube
            .values()
            .iter()
            .zip(back.values())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        let raw_len = std::fs::metadata(hdr.with_extension("raw"))
            .expect("raw companion")
            .len();
        println!(
            "{}: {} voxels, {} raw bytes, round trip bit-identical: {identical}",
            interleave.as_str(),
            back.values().len(),
            raw_len
        );
        assert!(identical);
    }
    println!("wrote {}", dir.display());
    Ok(())
}
