//! Small two-stage training run: Gaussian-noise pre-training followed by
//! stripe fine-tuning, with the loss trajectory printed.
//!
//! Run with: cargo run --release --example train_toy

use hsidiff::datacube::{extract_patch, gaussian_bump_cube, sample_patches};
use hsidiff::denoiser::DenoiserConfig;
use hsidiff::stripesynth::{synth_stripes, StripeConfig};
use hsidiff::trainer::{run_pipeline, PatchSet, Stage1Init, StageConfig, StageId};

fn main() -> hsidiff::Result<()> {
    let cube = gaussian_bump_cube(48, 48, 48, 7);
    let mut stripe_cfg = StripeConfig::new(11);
    stripe_cfg.sigma = 0.15;
    stripe_cfg.stripe_frequency = 0.3;
    let (striped, _) = synth_stripes(&cube, &stripe_cfg)?;

    let clean_patches = sample_patches(&cube, 96, 8, 3)?;
    let striped_patches: Vec<_> = clean_patches
        .iter()
        .map(|p| extract_patch(&striped, p.index))
        .collect::<hsidiff::Result<_>>()?;
    let stage2_data = PatchSet::clean_only(clean_patches.clone())?;
    let stage3_data = PatchSet::pairs(clean_patches, striped_patches)?;

    let mut cfg2 = StageConfig::new(StageId::II, 5);
    cfg2.steps = 150;
    cfg2.batch_size = 4;
    cfg2.lr0 = 1e-3;
    let mut cfg3 = StageConfig::new(StageId::III, 6);
    cfg3.steps = 150;
    cfg3.batch_size = 4;
    cfg3.lr0 = 1e-3;
    cfg3.augment = Some(hsidiff::augment::MixConfig::cutmix(1.0, 0));

    let (net, logs) = run_pipeline(
        Stage1Init::Random(DenoiserConfig::toy(8, 100, 1)),
        cfg2,
        cfg3,
        &stage2_data,
        &stage3_data,
        None,
    )?;

    for log in &logs {
        let first = &log.records[0];
        let last = log.records.last().unwrap();
        println!(
            "stage {}: loss {:.3e} -> {:.3e} over {} steps ({} mix events)",
            log.stage.as_str(),
            first.loss,
            last.loss,
            log.records.len(),
            log.aug_events.len()
        );
        for r in log.records.iter().step_by(50) {
            println!("  step {:4}: loss {:.4e}, lr {:.2e}", r.step, r.loss, r.lr);
        }
    }
    println!(
        "trained {} parameters; final checkpoint would carry {} tensors",
        net.trainable_param_count(),
        net.tensors.len()
    );
    Ok(())
}
