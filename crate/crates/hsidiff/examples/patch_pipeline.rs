//! Sample random 3D patches from a cube and reassemble an overlapping
//! tiling back into the full scene with mean blending.
//!
//! Run with: cargo run --release --example patch_pipeline

use hsidiff::datacube::{
    extract_patch, gaussian_bump_cube, reassemble, sample_patches, PatchIndex,
};
use hsidiff::metrics;

fn main() -> hsidiff::Result<()> {
    let cube = gaussian_bump_cube(48, 48, 32, 11);

    let patches = sample_patches(&cube, 8, 16, 99)?;
    println!("sampled {} random 16^3 patches:", patches.len());
    for p in &patches {
        println!(
            "  start (line {:2}, sample {:2}, band {:2}) from `{}`",
            p.index.line0, p.index.sample0, p.index.band0, p.source_id
        );
    }

    // Half-extent stride tiling covers the cube; reassembly averages the
    // overlaps and reproduces the source exactly.
    let extent = 16;
    let stride = extent / 2;
    let starts = |dim: usize| -> Vec<usize> {
        let last = dim - extent;
        let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
        if *v.last().unwrap() != last {
            v.push(last);
        }
        v
    };
    let mut tiles = Vec::new();
    for &l0 in &starts(cube.lines) {
        for &s0 in &starts(cube.samples) {
            for &b0 in &starts(cube.bands) {
                let index = PatchIndex {
                    line0: l0,
                    sample0: s0,
                    band0: b0,
                    extent,
                };
                let patch = extract_patch(&cube, index)?;
                tiles.push((index, patch.values));
            }
        }
    }
    let rebuilt = reassemble(&tiles, cube.lines, cube.samples, cube.bands)?;
    let psnr = metrics::psnr(&cube, &rebuilt, 1.0)?;
    println!(
        "reassembled {} overlapping tiles; PSNR vs source = {}",
        tiles.len(),
        if psnr.is_infinite() {
            "infinite (exact)".to_string()
        } else {
            format!("{psnr:.2} dB")
        }
    );
    Ok(())
}
