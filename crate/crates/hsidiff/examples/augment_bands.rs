//! Spectral Mixup and CutMix: convex band blends of two patches.
//!
//! Run with: cargo run --release --example augment_bands

use hsidiff::augment::{draw_band_set, draw_lambda, mix_bands, MixConfig};
use hsidiff::datacube::{gaussian_bump_cube, sample_patches};
use hsidiff::rng::Stream;

fn main() -> hsidiff::Result<()> {
    let cube_a = gaussian_bump_cube(32, 32, 32, 1);
    let cube_b = gaussian_bump_cube(32, 32, 32, 2);
    let x1 = sample_patches(&cube_a, 1, 16, 3)?.remove(0);
    let x2 = sample_patches(&cube_b, 1, 16, 4)?.remove(0);

    // Mixup: every band blended with a uniform weight.
    let mixup = MixConfig::mixup(5);
    let mut stream = Stream::new(mixup.seed);
    let lambda = draw_lambda(&mixup, &mut stream);
    let mixed = mix_bands(&x1, &x2, lambda, None)?;
    println!("mixup: lambda = {lambda:.4}, all {} bands blended", x1.extent());
    println!(
        "  first voxel: {:.4} = {lambda:.4} * {:.4} + {:.4} * {:.4}",
        mixed.values[0],
        x1.values[0],
        1.0 - lambda,
        x2.values[0]
    );

    // CutMix: a contiguous spectral window whose width tracks 1 - lambda.
    let cutmix = MixConfig::cutmix(0.4, 6);
    let mut stream = Stream::new(cutmix.seed);
    for _ in 0..4 {
        let lambda = draw_lambda(&cutmix, &mut stream);
        let band_set = draw_band_set(&cutmix, x1.extent(), lambda, &mut stream);
        let out = mix_bands(&x1, &x2, lambda, Some(&band_set))?;
        let untouched = out
            .values
            .iter()
            .zip(&x1.values)
            .enumerate()
            .filter(|(k, (a, b))| !band_set.contains(&(k % x1.extent())) && a == b)
            .count();
        println!(
            "cutmix: lambda = {lambda:.4}, bands {}..={} mixed, {} off-window voxels untouched",
            band_set[0],
            band_set.last().unwrap(),
            untouched
        );
    }
    Ok(())
}
