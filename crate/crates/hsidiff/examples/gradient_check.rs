//! Verify the hand-written backward pass against central finite
//! differences on the small two-conv network.
//!
//! Run with: cargo run --release --example gradient_check

use hsidiff::denoiser::{Denoiser, DenoiserConfig};
use hsidiff::rng::Stream;

fn main() -> hsidiff::Result<()> {
    let net = Denoiser::init_random(DenoiserConfig::tiny(6, 8, 3))?;
    println!("{} trainable parameters", net.trainable_param_count());

    let mut stream = Stream::new(4);
    let numel = 6 * 6 * 6;
    let x: Vec<f64> = (0..numel).map(|_| stream.uniform(-1.0, 1.0)).collect();
    let upstream: Vec<f64> = (0..numel).map(|_| stream.uniform(-1.0, 1.0)).collect();
    let t = 2;
    let analytic = net.backward(&x, t, &upstream)?;

    let h = 1e-4;
    let mut worst = (0.0f64, String::new());
    for (ti, tensor) in net.tensors.iter().enumerate() {
        if tensor.frozen {
            continue;
        }
        for p in 0..tensor.numel() {
            let probe = |delta: f64| -> f64 {
                let mut shifted = net.clone();
                shifted.tensors[ti].data[p] += delta;
                shifted
                    .forward(&x, t)
                    .expect("forward")
                    .iter()
                    .zip(&upstream)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let numeric = (probe(h) - probe(-h)) / (2.0 * h);
            let a = analytic.tensors[ti][p];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst.0 {
                worst = (rel, format!("{}[{p}]", tensor.name));
            }
        }
    }
    println!("worst relative error: {:.3e} at {}", worst.0, worst.1);
    assert!(worst.0 < 1e-4);
    println!("analytic gradients agree with finite differences");
    Ok(())
}
