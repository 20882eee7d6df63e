//! Build a linear variance schedule, dump it as CSV, and check the
//! closed-form forward process against its per-step definition.
//!
//! Run with: cargo run --release --example noise_schedule

use hsidiff::diffusion::{
    make_schedule, q_sample, ScheduleKind, DEFAULT_BETA_END, DEFAULT_BETA_START,
};
use hsidiff::rng::Stream;

fn main() -> hsidiff::Result<()> {
    let schedule = make_schedule(100, DEFAULT_BETA_START, DEFAULT_BETA_END, ScheduleKind::Linear)?;
    let csv_path = std::env::temp_dir().join("hsidiff-schedule.csv");
    schedule.write_csv(&csv_path)?;
    println!("wrote {} ({} rows)", csv_path.display(), schedule.len());
    for t in [0usize, 24, 49, 74, 99] {
        println!(
            "  t = {t:2}: beta = {:.6}, alpha_bar = {:.6}",
            schedule.beta[t], schedule.alpha_bar[t]
        );
    }

    // Monte Carlo check: noising a constant signal step by step matches
    // the closed form in mean and variance.
    let trials = 20_000;
    let x0 = 1.0f64;
    let mut stream = Stream::new(5);
    let (mut sum, mut sumsq) = (0.0, 0.0);
    for _ in 0..trials {
        let mut x = x0;
        for t in 0..schedule.len() {
            x = (1.0 - schedule.beta[t]).sqrt() * x + schedule.beta[t].sqrt() * stream.normal();
        }
        sum += x;
        sumsq += x * x;
    }
    let mean = sum / trials as f64;
    let var = sumsq / trials as f64 - mean * mean;
    let t_last = schedule.len() - 1;
    println!(
        "sequential noising of x0 = 1 over {} steps: mean {mean:.4} (closed form {:.4}), var {var:.4} (closed form {:.4})",
        schedule.len(),
        schedule.alpha_bar[t_last].sqrt(),
        1.0 - schedule.alpha_bar[t_last]
    );

    // And the closed form directly.
    let eps = vec![0.0; 1];
    let xt = q_sample(&[x0], t_last, &eps, &schedule)?;
    println!("q_sample with zero draw keeps the scaled signal: {:.4}", xt[0]);
    Ok(())
}
