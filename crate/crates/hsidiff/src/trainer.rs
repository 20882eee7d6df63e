//! Optimizer and the three-stage training orchestration.
//!
//! Stage I reshapes 2D weights into the 3D chain (or starts random),
//! Stage II trains noise prediction on clean patches with per-sample
//! Gaussian noise, Stage III fine-tunes on synthetic stripe pairs with
//! optional spectral mixing augmentation. One Adam setup drives every
//! stage; the base learning rate is cosine-decayed and scaled by relative
//! dataset size.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{draw_band_set, draw_lambda, mix_bands, MixConfig};
use crate::datacube::CubePatch;
use crate::denoiser::{Denoiser, DenoiserConfig, Gradients, InflateMode, Kernel2D, Tensor};
use crate::diffusion::{noise_prediction_loss, LossSample};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Training stage. Stage I is an initialization, not a training loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageId {
    I,
    II,
    III,
}

impl StageId {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageId::I => "I",
            StageId::II => "II",
            StageId::III => "III",
        }
    }
}

/// Per-stage optimizer and data settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: StageId,
    pub steps: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Dataset-size learning-rate scale, clipped to [0.1, 1].
    pub lr_scale: f64,
    pub seed: u64,
    /// Stage II noise bound: per-sample sigma ~ U(0, sigma_max).
    pub sigma_max: f64,
    /// Stage III spectral mixing; applied per sample with `augment_prob`.
    pub augment: Option<MixConfig>,
    pub augment_prob: f64,
    /// Free-form description of the data source, echoed into logs.
    pub data: String,
}

impl StageConfig {
    pub fn new(stage: StageId, seed: u64) -> Self {
        StageConfig {
            stage,
            steps: 30_000,
            batch_size: 32,
            lr0: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            lr_scale: 1.0,
            seed,
            sigma_max: 15.0 / 255.0,
            augment: None,
            augment_prob: 0.5,
            data: String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage == StageId::I {
            return Err(Error::Config(
                "stage I is weight initialization, not a training loop".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(self.lr_scale > 0.0 && self.lr_scale <= 1.0) {
            return Err(Error::Config(format!(
                "lr_scale must be in (0, 1], got {}",
                self.lr_scale
            )));
        }
        if self.sigma_max < 0.0 {
            return Err(Error::Config("sigma_max must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return Err(Error::Config("augment_prob must be in [0, 1]".into()));
        }
        if let Some(mix) = &self.augment {
            mix.validate()?;
        }
        Ok(())
    }
}

/// Clip the dataset-size ratio into the accepted scale window.
pub fn dataset_lr_scale(stage_len: usize, reference_len: usize) -> f64 {
    if reference_len == 0 {
        return 1.0;
    }
    (stage_len as f64 / reference_len as f64).clamp(0.1, 1.0)
}

/// Cosine learning-rate decay: `lr0 * 0.5 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    assert!(total >= 1 && step <= total);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Adam first/second moment accumulators, parallel to the net tensors.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(net: &Denoiser) -> Self {
        OptimizerState {
            m: net.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: net.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
            step: 0,
        }
    }
}

/// Bias-corrected update of one parameter buffer.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) {
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
}

/// One optimizer step over every trainable tensor. Aborts on the first
/// non-finite gradient, naming the parameter tensor.
pub fn adam_step(
    state: &mut OptimizerState,
    net: &mut Denoiser,
    grads: &Gradients,
    lr: f64,
    cfg: &StageConfig,
) -> Result<()> {
    for (ti, tensor) in net.tensors.iter().enumerate() {
        if tensor.frozen {
            continue;
        }
        if grads.tensors[ti].iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of `{}` is not finite",
                tensor.name
            )));
        }
    }
    state.step += 1;
    for (ti, tensor) in net.tensors.iter_mut().enumerate() {
        if tensor.frozen {
            continue;
        }
        adam_update(
            &mut tensor.data,
            &grads.tensors[ti],
            &mut state.m[ti],
            &mut state.v[ti],
            state.step,
            lr,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_epsilon,
        );
    }
    Ok(())
}

/// In-memory training data: clean patches, with striped partners for
/// Stage III.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub clean: Vec<CubePatch>,
    pub striped: Option<Vec<CubePatch>>,
}

impl PatchSet {
    pub fn clean_only(clean: Vec<CubePatch>) -> Result<Self> {
        if clean.is_empty() {
            return Err(Error::Config("patch set must be non-empty".into()));
        }
        let extent = clean[0].extent();
        if clean.iter().any(|p| p.extent() != extent) {
            return Err(Error::Dimension("patches have mixed extents".into()));
        }
        Ok(PatchSet {
            clean,
            striped: None,
        })
    }

    pub fn pairs(clean: Vec<CubePatch>, striped: Vec<CubePatch>) -> Result<Self> {
        let mut set = Self::clean_only(clean)?;
        if striped.len() != set.clean.len() {
            return Err(Error::Dimension(format!(
                "{} clean vs {} striped patches",
                set.clean.len(),
                striped.len()
            )));
        }
        let extent = set.clean[0].extent();
        if striped.iter().any(|p| p.extent() != extent) {
            return Err(Error::Dimension("striped patches have mixed extents".into()));
        }
        set.striped = Some(striped);
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn extent(&self) -> usize {
        self.clean[0].extent()
    }
}

/// One logged optimization step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// One spectral-mix augmentation event.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugEvent {
    pub step: usize,
    pub slot: usize,
    pub partner: usize,
    pub lambda: f64,
    pub band_lo: usize,
    pub band_hi: usize,
}

/// Per-stage training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingLog {
    pub stage: StageId,
    pub records: Vec<StepRecord>,
    pub aug_events: Vec<AugEvent>,
}

impl TrainingLog {
    /// CSV with columns `step,loss,lr,stage`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,lr,stage\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{}", r.step, r.loss, r.lr, self.stage.as_str());
        }
        out
    }
}

/// Epoch-shuffled index stream: cycles through a permutation of the data
/// set, reshuffling at each exhaustion.
struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    root: Stream,
}

impl EpochSampler {
    fn new(len: usize, root: Stream) -> Self {
        let mut sampler = EpochSampler {
            order: (0..len).collect(),
            cursor: 0,
            epoch: 0,
            root,
        };
        sampler.reshuffle();
        sampler
    }

    fn reshuffle(&mut self) {
        let mut stream = self.root.fork(self.epoch);
        stream.shuffle(&mut self.order);
        self.epoch += 1;
        self.cursor = 0;
    }

    fn next(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.reshuffle();
        }
        let idx = self.order[self.cursor];
        self.cursor += 1;
        idx
    }
}

const DIVERGENCE_LOSS: f64 = 1e3;
const DIVERGENCE_PATIENCE: usize = 100;

/// Checkpoint sink for a single stage: (completed steps, current net).
pub type StageCheckpointSink<'a> = &'a mut dyn FnMut(usize, &Denoiser) -> Result<()>;
/// Checkpoint sink for the pipeline: (stage, completed steps, current net).
pub type PipelineCheckpointSink<'a> = &'a mut dyn FnMut(StageId, usize, &Denoiser) -> Result<()>;

/// Run one training stage. Stage II draws Gaussian noise over clean
/// patches; Stage III uses the (clean, striped) pairs, optionally mixed.
/// `on_checkpoint` fires every 10% of steps and at the end.
pub fn run_stage(
    cfg: &StageConfig,
    net: Denoiser,
    data: &PatchSet,
    mut on_checkpoint: Option<StageCheckpointSink<'_>>,
) -> Result<(Denoiser, TrainingLog)> {
    cfg.validate()?;
    let mut net = net;
    let mut log = TrainingLog {
        stage: cfg.stage,
        records: Vec::with_capacity(cfg.steps),
        aug_events: Vec::new(),
    };
    if cfg.steps == 0 {
        return Ok((net, log));
    }
    if cfg.stage == StageId::III && data.striped.is_none() {
        return Err(Error::Config(
            "stage III needs striped partners in the patch set".into(),
        ));
    }
    let extent = data.extent();
    if extent != net.config.extent {
        return Err(Error::Dimension(format!(
            "patch extent {extent} != network extent {}",
            net.config.extent
        )));
    }
    let t_count = net.config.t_count;
    let root = Stream::new(cfg.seed);
    let mut sampler = EpochSampler::new(data.len(), root.fork(0));
    let mut state = OptimizerState::new(&net);
    let checkpoint_every = cfg.steps.div_ceil(10);
    let mut high_loss_streak = 0usize;

    for step in 0..cfg.steps {
        let lr = cosine_lr(step, cfg.steps, cfg.lr0 * cfg.lr_scale);
        let mut step_stream = root.fork(1 + step as u64);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for slot in 0..cfg.batch_size {
            let idx = sampler.next();
            let t = step_stream.uniform_usize(t_count);
            match cfg.stage {
                StageId::II => {
                    let clean = data.clean[idx].values_f64();
                    let sigma = step_stream.uniform(0.0, cfg.sigma_max);
                    let mut input = Vec::with_capacity(clean.len());
                    let mut target = Vec::with_capacity(clean.len());
                    for &c in &clean {
                        let n = sigma * step_stream.normal();
                        input.push(c + n);
                        target.push(n);
                    }
                    batch.push(LossSample { input, t, target });
                }
                StageId::III => {
                    let striped_set = data.striped.as_ref().expect("checked above");
                    let (clean, striped) = match &cfg.augment {
                        Some(mix) if step_stream.bernoulli(cfg.augment_prob) => {
                            let partner = step_stream.uniform_usize(data.len());
                            let lambda = draw_lambda(mix, &mut step_stream);
                            let band_set =
                                draw_band_set(mix, extent, lambda, &mut step_stream);
                            let clean = mix_bands(
                                &data.clean[idx],
                                &data.clean[partner],
                                lambda,
                                Some(&band_set),
                            )?;
                            let striped = mix_bands(
                                &striped_set[idx],
                                &striped_set[partner],
                                lambda,
                                Some(&band_set),
                            )?;
                            log.aug_events.push(AugEvent {
                                step,
                                slot,
                                partner,
                                lambda,
                                band_lo: band_set[0],
                                band_hi: *band_set.last().unwrap(),
                            });
                            (clean, striped)
                        }
                        _ => (data.clean[idx].clone(), striped_set[idx].clone()),
                    };
                    let clean = clean.values_f64();
                    let striped = striped.values_f64();
                    let target: Vec<f64> =
                        striped.iter().zip(&clean).map(|(s, c)| s - c).collect();
                    batch.push(LossSample {
                        input: striped,
                        t,
                        target,
                    });
                }
                StageId::I => unreachable!("rejected by validate"),
            }
        }
        let (loss, grads) = noise_prediction_loss(&net, &batch)?;
        adam_step(&mut state, &mut net, &grads, lr, cfg)?;
        log.records.push(StepRecord { step, loss, lr });

        if loss > DIVERGENCE_LOSS {
            high_loss_streak += 1;
            if high_loss_streak >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged(format!(
                    "loss above {DIVERGENCE_LOSS} for {DIVERGENCE_PATIENCE} consecutive steps \
                     (stage {}, step {step}, last loss {loss:.3e})",
                    cfg.stage.as_str()
                )));
            }
        } else {
            high_loss_streak = 0;
        }

        if let Some(cb) = on_checkpoint.as_deref_mut() {
            let is_cadence = (step + 1) % checkpoint_every == 0;
            let is_last = step + 1 == cfg.steps;
            if is_cadence || is_last {
                cb(step + 1, &net)?;
            }
        }
    }
    Ok((net, log))
}

/// Stage I weight source.
pub enum Stage1Init<'a> {
    Random(DenoiserConfig),
    From2d {
        config: DenoiserConfig,
        sources: &'a [(String, Kernel2D)],
        mode: InflateMode,
    },
}

/// The full pipeline: Stage I initialization, Stage II denoising
/// pre-training, Stage III stripe fine-tuning. Each stage's base learning
/// rate is scaled by its dataset size relative to Stage II, clipped to
/// [0.1, 1].
pub fn run_pipeline(
    stage1: Stage1Init<'_>,
    mut cfg2: StageConfig,
    mut cfg3: StageConfig,
    stage2_data: &PatchSet,
    stage3_data: &PatchSet,
    mut on_checkpoint: Option<PipelineCheckpointSink<'_>>,
) -> Result<(Denoiser, Vec<TrainingLog>)> {
    let net = match stage1 {
        Stage1Init::Random(config) => Denoiser::init_random(config)?,
        Stage1Init::From2d {
            config,
            sources,
            mode,
        } => Denoiser::init_from_2d(config, sources, mode)?,
    };
    cfg2.lr_scale = dataset_lr_scale(stage2_data.len(), stage2_data.len());
    cfg3.lr_scale = dataset_lr_scale(stage3_data.len(), stage2_data.len());

    let mut logs = Vec::new();
    let mut cb2 = on_checkpoint
        .as_deref_mut()
        .map(|cb| move |step: usize, net: &Denoiser| cb(StageId::II, step, net));
    let (net, log2) = run_stage(
        &cfg2,
        net,
        stage2_data,
        cb2.as_mut().map(|cb| cb as &mut dyn FnMut(usize, &Denoiser) -> Result<()>),
    )?;
    logs.push(log2);
    let mut cb3 = on_checkpoint
        .map(|cb| move |step: usize, net: &Denoiser| cb(StageId::III, step, net));
    let (net, log3) = run_stage(
        &cfg3,
        net,
        stage3_data,
        cb3.as_mut().map(|cb| cb as &mut dyn FnMut(usize, &Denoiser) -> Result<()>),
    )?;
    logs.push(log3);
    Ok((net, logs))
}

/// A saved training state: the network plus stage/step markers.
#[derive(Debug, Clone)]
pub struct CheckpointBundle {
    pub stage: StageId,
    pub step: usize,
    pub net: Denoiser,
}

const META_CONFIG: &str = "meta/config";
const META_BUNDLE: &str = "meta/bundle";

/// Serialize the bundle through the tensor container: network tensors
/// plus two meta tensors carrying the config and stage markers.
pub fn save_bundle(path: &Path, bundle: &CheckpointBundle) -> Result<()> {
    let cfg = &bundle.net.config;
    let mut tensors = bundle.net.tensors.clone();
    tensors.push(Tensor {
        name: META_CONFIG.into(),
        shape: vec![9],
        data: vec![
            cfg.extent as f64,
            cfg.base_channels as f64,
            cfg.levels as f64,
            cfg.convs_per_level as f64,
            cfg.time_embed_dim as f64,
            cfg.t_count as f64,
            cfg.kernel as f64,
            (cfg.seed & 0xFFFF_FFFF) as f64,
            (cfg.seed >> 32) as f64,
        ],
        frozen: false,
    });
    let stage_code = match bundle.stage {
        StageId::I => 1.0,
        StageId::II => 2.0,
        StageId::III => 3.0,
    };
    tensors.push(Tensor {
        name: META_BUNDLE.into(),
        shape: vec![2],
        data: vec![stage_code, bundle.step as f64],
        frozen: false,
    });
    crate::denoiser::save_tensors(path, &tensors)
}

pub fn load_bundle(path: &Path) -> Result<CheckpointBundle> {
    let tensors = crate::denoiser::load_tensors(path)?;
    let meta = tensors
        .iter()
        .find(|t| t.name == META_CONFIG)
        .ok_or_else(|| Error::Checkpoint("missing meta/config tensor".into()))?;
    if meta.data.len() != 9 {
        return Err(Error::Checkpoint("meta/config has wrong length".into()));
    }
    let config = DenoiserConfig {
        extent: meta.data[0] as usize,
        base_channels: meta.data[1] as usize,
        levels: meta.data[2] as usize,
        convs_per_level: meta.data[3] as usize,
        time_embed_dim: meta.data[4] as usize,
        t_count: meta.data[5] as usize,
        kernel: meta.data[6] as usize,
        seed: (meta.data[7] as u64) | ((meta.data[8] as u64) << 32),
    };
    let bundle_meta = tensors
        .iter()
        .find(|t| t.name == META_BUNDLE)
        .ok_or_else(|| Error::Checkpoint("missing meta/bundle tensor".into()))?;
    let stage = match bundle_meta.data[0] as i64 {
        1 => StageId::I,
        2 => StageId::II,
        3 => StageId::III,
        other => {
            return Err(Error::Checkpoint(format!("unknown stage code {other}")));
        }
    };
    let step = bundle_meta.data[1] as usize;
    let net_tensors: Vec<Tensor> = tensors
        .into_iter()
        .filter(|t| t.name != META_CONFIG && t.name != META_BUNDLE)
        .collect();
    let net = Denoiser::from_tensors(config, net_tensors)?;
    Ok(CheckpointBundle { stage, step, net })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datacube::PatchIndex;

    fn patch(extent: usize, seed: u64) -> CubePatch {
        let mut s = Stream::new(seed);
        CubePatch::new(
            PatchIndex {
                line0: 0,
                sample0: 0,
                band0: 0,
                extent,
            },
            (0..extent * extent * extent)
                .map(|_| s.uniform(0.0, 1.0) as f32)
                .collect(),
            "test",
        )
        .unwrap()
    }

    fn toy_set(extent: usize, n: usize, striped: bool) -> PatchSet {
        let clean: Vec<CubePatch> = (0..n).map(|i| patch(extent, 100 + i as u64)).collect();
        if striped {
            let striped: Vec<CubePatch> = clean
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut s = Stream::new(500 + i as u64);
                    let values: Vec<f32> = p
                        .values
                        .iter()
                        .map(|&v| v + (s.normal() * 0.05) as f32)
                        .collect();
                    CubePatch::new(p.index, values, "test").unwrap()
                })
                .collect();
            PatchSet::pairs(clean, striped).unwrap()
        } else {
            PatchSet::clean_only(clean).unwrap()
        }
    }

    #[test]
    fn adam_first_step_scalar() {
        let mut params = vec![0.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_update(&mut params, &[1.0], &mut m, &mut v, 1, 1e-4, 0.9, 0.999, 1e-8);
        assert!((m[0] - 0.1).abs() < 1e-15);
        assert!((v[0] - 0.001).abs() < 1e-15);
        // m_hat = 1, v_hat = 1, update = -lr / (1 + eps).
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((params[0] - expected).abs() < 1e-18, "{}", params[0]);
    }

    #[test]
    fn adam_zero_gradients_leave_params_and_decay_moments() {
        let mut params = vec![0.7];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_update(&mut params, &[0.0], &mut m, &mut v, 1, 0.1, 0.9, 0.999, 1e-8);
        assert_eq!(params, vec![0.7]);
        assert_eq!((m[0], v[0]), (0.0, 0.0));
        // Prime the moments, then a zero-grad step decays them exactly.
        adam_update(&mut params, &[1.0], &mut m, &mut v, 2, 0.0, 0.9, 0.999, 1e-8);
        let (m1, v1) = (m[0], v[0]);
        adam_update(&mut params, &[0.0], &mut m, &mut v, 3, 0.0, 0.9, 0.999, 1e-8);
        assert!((m[0] - 0.9 * m1).abs() < 1e-15);
        assert!((v[0] - 0.999 * v1).abs() < 1e-15);
    }

    #[test]
    fn adam_descends_a_parabola() {
        let mut w = vec![1.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        for step in 1..=100 {
            let g = vec![2.0 * w[0]];
            adam_update(&mut w, &g, &mut m, &mut v, step, 0.1, 0.9, 0.999, 1e-8);
        }
        assert!(w[0].abs() < 0.5, "w = {}", w[0]);
    }

    #[test]
    fn adam_moments_stay_finite_and_nonnegative() {
        let mut w = vec![0.3, -0.8];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        let mut s = Stream::new(3);
        for step in 1..=500 {
            let g: Vec<f64> = (0..2).map(|_| s.normal() * 10.0).collect();
            adam_update(&mut w, &g, &mut m, &mut v, step, 0.01, 0.9, 0.999, 1e-8);
            assert!(v.iter().all(|&x| x >= 0.0 && x.is_finite()));
            assert!(m.iter().all(|&x| x.is_finite()));
        }
    }

    #[test]
    fn cosine_lr_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-4), 1e-4);
        assert!(cosine_lr(100, 100, 1e-4).abs() < 1e-19);
        assert!((cosine_lr(50, 100, 1e-4) - 5e-5).abs() < 1e-19);
    }

    #[test]
    fn lr_scale_ratio_and_clip() {
        assert_eq!(dataset_lr_scale(25, 100), 0.25);
        assert_eq!(dataset_lr_scale(100, 100), 1.0);
        assert_eq!(dataset_lr_scale(400, 100), 1.0);
        assert_eq!(dataset_lr_scale(1, 100), 0.1);
        // Ratio 0.25 applied to the default lr0.
        assert!((1e-4 * dataset_lr_scale(25, 100) - 2.5e-5).abs() < 1e-20);
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let net = Denoiser::init_random(DenoiserConfig::tiny(4, 10, 1)).unwrap();
        let before: Vec<Vec<f64>> = net.tensors.iter().map(|t| t.data.clone()).collect();
        let mut cfg = StageConfig::new(StageId::II, 7);
        cfg.steps = 0;
        let data = toy_set(4, 3, false);
        let (after, log) = run_stage(&cfg, net, &data, None).unwrap();
        assert!(log.records.is_empty());
        for (t, b) in after.tensors.iter().zip(&before) {
            assert_eq!(&t.data, b);
        }
    }

    #[test]
    fn stage2_loss_trends_down() {
        let net = Denoiser::init_random(DenoiserConfig::tiny(4, 10, 2)).unwrap();
        let mut cfg = StageConfig::new(StageId::II, 8);
        cfg.steps = 400;
        cfg.batch_size = 2;
        cfg.lr0 = 2e-3;
        let data = toy_set(4, 6, false);
        let (_, log) = run_stage(&cfg, net, &data, None).unwrap();
        let first: f64 = log.records[..100].iter().map(|r| r.loss).sum::<f64>() / 100.0;
        let last: f64 = log.records[300..].iter().map(|r| r.loss).sum::<f64>() / 100.0;
        assert!(last < first, "first {first} last {last}");
    }

    #[test]
    fn lr_trajectory_matches_cosine_exactly() {
        let net = Denoiser::init_random(DenoiserConfig::tiny(4, 10, 3)).unwrap();
        let mut cfg = StageConfig::new(StageId::II, 9);
        cfg.steps = 37;
        cfg.batch_size = 1;
        cfg.lr_scale = 0.5;
        let data = toy_set(4, 3, false);
        let (_, log) = run_stage(&cfg, net, &data, None).unwrap();
        for r in &log.records {
            assert_eq!(r.lr, cosine_lr(r.step, 37, cfg.lr0 * 0.5));
        }
    }

    #[test]
    fn same_seed_same_checkpoint_bits() {
        let data = toy_set(4, 4, true);
        let run = || {
            let net = Denoiser::init_random(DenoiserConfig::tiny(4, 10, 4)).unwrap();
            let mut cfg = StageConfig::new(StageId::III, 11);
            cfg.steps = 50;
            cfg.batch_size = 2;
            cfg.augment = Some(MixConfig::cutmix(0.4, 0));
            let (net, log) = run_stage(&cfg, net, &data, None).unwrap();
            (net, log)
        };
        let (a, log_a) = run();
        let (b, log_b) = run();
        for (ta, tb) in a.tensors.iter().zip(&b.tensors) {
            for (x, y) in ta.data.iter().zip(&tb.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(log_a.to_csv(), log_b.to_csv());
        assert_eq!(log_a.aug_events.len(), log_b.aug_events.len());
    }

    #[test]
    fn divergence_aborts_with_diagnostics() {
        // Constant huge targets with a zero learning rate cannot recover.
        let clean: Vec<CubePatch> = (0..2).map(|i| patch(4, i)).collect();
        let striped: Vec<CubePatch> = clean
            .iter()
            .map(|p| {
                let values: Vec<f32> = p.values.iter().map(|&v| v + 100.0).collect();
                CubePatch::new(p.index, values, "test").unwrap()
            })
            .collect();
        let data = PatchSet::pairs(clean, striped).unwrap();
        let net = Denoiser::init_random(DenoiserConfig::tiny(4, 10, 5)).unwrap();
        let mut cfg = StageConfig::new(StageId::III, 12);
        cfg.steps = 500;
        cfg.batch_size = 1;
        cfg.lr0 = 1e-30;
        match run_stage(&cfg, net, &data, None) {
            Err(Error::Diverged(msg)) => assert!(msg.contains("100"), "{msg}"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_callback_fires_on_cadence() {
        let net = Denoiser::init_random(DenoiserConfig::tiny(4, 10, 6)).unwrap();
        let mut cfg = StageConfig::new(StageId::II, 13);
        cfg.steps = 20;
        cfg.batch_size = 1;
        let data = toy_set(4, 3, false);
        let mut seen = Vec::new();
        let mut cb = |step: usize, _net: &Denoiser| {
            seen.push(step);
            Ok(())
        };
        run_stage(&cfg, net, &data, Some(&mut cb)).unwrap();
        assert_eq!(seen, vec![2, 4, 6, 8, 10, 12, 14, 16, 18, 20]);
    }

    #[test]
    fn pipeline_with_zero_steps_returns_inflated_weights() {
        let k = 3;
        let config = DenoiserConfig::tiny(4, 10, 7);
        let mut s = Stream::new(70);
        let sources = vec![
            (
                "enc0.conv0".to_string(),
                Kernel2D::new(
                    k,
                    k,
                    1,
                    4,
                    (0..k * k * 4).map(|_| s.uniform(-1.0, 1.0)).collect(),
                    vec![0.1; 4],
                )
                .unwrap(),
            ),
            (
                "out".to_string(),
                Kernel2D::new(
                    k,
                    k,
                    4,
                    1,
                    (0..k * k * 4).map(|_| s.uniform(-1.0, 1.0)).collect(),
                    vec![-0.2],
                )
                .unwrap(),
            ),
        ];
        let reference =
            Denoiser::init_from_2d(config, &sources, InflateMode::Normalized).unwrap();
        let mut cfg2 = StageConfig::new(StageId::II, 14);
        cfg2.steps = 0;
        let mut cfg3 = StageConfig::new(StageId::III, 15);
        cfg3.steps = 0;
        let data2 = toy_set(4, 3, false);
        let data3 = toy_set(4, 3, true);
        let (net, logs) = run_pipeline(
            Stage1Init::From2d {
                config,
                sources: &sources,
                mode: InflateMode::Normalized,
            },
            cfg2,
            cfg3,
            &data2,
            &data3,
            None,
        )
        .unwrap();
        assert_eq!(logs.len(), 2);
        assert!(logs.iter().all(|l| l.records.is_empty()));
        for (a, b) in net.tensors.iter().zip(&reference.tensors) {
            assert_eq!(a.data, b.data, "tensor {}", a.name);
        }
    }

    #[test]
    fn pipeline_scales_stage3_lr_by_dataset_ratio() {
        let net_cfg = DenoiserConfig::tiny(4, 10, 8);
        let mut cfg2 = StageConfig::new(StageId::II, 16);
        cfg2.steps = 1;
        cfg2.batch_size = 1;
        let mut cfg3 = StageConfig::new(StageId::III, 17);
        cfg3.steps = 1;
        cfg3.batch_size = 1;
        let data2 = toy_set(4, 8, false);
        let data3 = toy_set(4, 2, true);
        let (_, logs) = run_pipeline(
            Stage1Init::Random(net_cfg),
            cfg2,
            cfg3,
            &data2,
            &data3,
            None,
        )
        .unwrap();
        // Stage III ratio 2/8 = 0.25: first-step lr = lr0 * 0.25.
        assert_eq!(logs[1].records[0].lr, cosine_lr(0, 1, 1e-4 * 0.25));
        assert!((1e-4f64 * 0.25 - 2.5e-5).abs() < 1e-20);
    }

    #[test]
    fn stage3_without_pairs_is_rejected() {
        let net = Denoiser::init_random(DenoiserConfig::tiny(4, 10, 9)).unwrap();
        let mut cfg = StageConfig::new(StageId::III, 18);
        cfg.steps = 1;
        let data = toy_set(4, 2, false);
        assert!(matches!(
            run_stage(&cfg, net, &data, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bundle_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.hsid");
        let net = Denoiser::init_random(DenoiserConfig::toy(8, 50, 0xDEAD_BEEF_CAFE)).unwrap();
        let bundle = CheckpointBundle {
            stage: StageId::II,
            step: 1234,
            net,
        };
        save_bundle(&path, &bundle).unwrap();
        let back = load_bundle(&path).unwrap();
        assert_eq!(back.stage, StageId::II);
        assert_eq!(back.step, 1234);
        assert_eq!(back.net.config, bundle.net.config);
        for (a, b) in back.net.tensors.iter().zip(&bundle.net.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.frozen, b.frozen);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
