//! Full-reference quality report (PSNR, SSIM, SAM) for a clean cube
//! against its striped version.
//!
//! Run with: cargo run --release --example quality_metrics

use hsidiff::datacube::gaussian_bump_cube;
use hsidiff::metrics::{evaluate, format_report, MetricConfig};
use hsidiff::stripesynth::{synth_stripes, StripeConfig};

fn main() -> hsidiff::Result<()> {
    let clean = gaussian_bump_cube(48, 48, 24, 9);
    let mut cfg = StripeConfig::new(17);
    cfg.sigma = 0.12;
    cfg.stripe_frequency = 0.3;
    let (striped, _) = synth_stripes(&clean, &cfg)?;

    let report = evaluate(&clean, &striped, &MetricConfig::default())?;
    print!("{}", format_report(&report));

    if let Some(per_band) = &report.per_band {
        let worst = per_band
            .psnr_db
            .iter()
            .enumerate()
            .filter_map(|(b, p)| p.map(|v| (b, v)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((band, value)) = worst {
            println!("worst band: {band} at {value:.2} dB");
        }
    }
    println!(
        "report JSON:\n{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
            .lines()
            .take(12)
            .collect::<Vec<_>>()
            .join("\n")
    );
    Ok(())
}
