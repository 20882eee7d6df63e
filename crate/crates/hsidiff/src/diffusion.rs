//! Diffusion mathematics: the variance schedule, the closed-form forward
//! process, the noise-prediction training loss with exact gradients,
//! ancestral reverse sampling, and the two destriping inference modes.

use std::fmt::Write as _;

use crate::datacube::CubePatch;
use crate::denoiser::{Denoiser, Gradients};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::util::write_atomic;

/// Shape of the beta sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

/// Variance schedule with derived per-step and cumulative products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Derive alpha and alpha_bar from explicit betas.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if beta.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::Config("every beta must satisfy 0 < beta < 1".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|&b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut product = 1.0;
        for &a in &alpha {
            product *= a;
            alpha_bar.push(product);
        }
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// CSV dump `t,beta,alpha,alpha_bar` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha,alpha_bar\n");
        for t in 0..self.len() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                t, self.beta[t], self.alpha[t], self.alpha_bar[t]
            );
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Build a schedule with `t_count` steps, beta interpolated linearly
/// between the endpoints inclusive.
pub fn make_schedule(
    t_count: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if t_count == 0 {
        return Err(Error::Config("t_count must be >= 1".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let ScheduleKind::Linear = kind;
    let beta: Vec<f64> = if t_count == 1 {
        vec![beta_start]
    } else {
        (0..t_count)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / (t_count - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(beta)
}

/// Default training schedule endpoints.
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// One training sample in the closed-form parametrization:
/// `xt = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`.
#[derive(Debug, Clone)]
pub struct DiffusionSample {
    pub x0: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
    pub xt: Vec<f64>,
}

impl DiffusionSample {
    /// Build a sample by noising `x0` at step `t` with the given draw.
    pub fn new(x0: Vec<f64>, t: usize, eps: Vec<f64>, schedule: &NoiseSchedule) -> Result<Self> {
        let xt = q_sample(&x0, t, &eps, schedule)?;
        Ok(DiffusionSample { x0, t, eps, xt })
    }
}

/// Closed-form forward process:
/// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t >= schedule.len() {
        return Err(Error::Index(format!(
            "t = {t} out of range (schedule length {})",
            schedule.len()
        )));
    }
    if x0.len() != eps.len() {
        return Err(Error::Dimension(format!(
            "x0 length {} != eps length {}",
            x0.len(),
            eps.len()
        )));
    }
    let signal = schedule.alpha_bar[t].sqrt();
    let noise = (1.0 - schedule.alpha_bar[t]).sqrt();
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| signal * x + noise * e)
        .collect())
}

/// Anything that predicts the noise component of an input at step `t`.
/// The trained [`Denoiser`] implements this; tests substitute oracles.
pub trait NoisePredictor {
    fn predict(&self, xt: &[f64], t: usize) -> Result<Vec<f64>>;
}

impl NoisePredictor for Denoiser {
    fn predict(&self, xt: &[f64], t: usize) -> Result<Vec<f64>> {
        self.forward(xt, t)
    }
}

/// Inputs to one loss evaluation: the (noisy input, step, target noise)
/// triple. Stage II/III batches and closed-form [`DiffusionSample`]s both
/// reduce to this.
#[derive(Debug, Clone)]
pub struct LossSample {
    pub input: Vec<f64>,
    pub t: usize,
    pub target: Vec<f64>,
}

impl From<&DiffusionSample> for LossSample {
    fn from(s: &DiffusionSample) -> Self {
        LossSample {
            input: s.xt.clone(),
            t: s.t,
            target: s.eps.clone(),
        }
    }
}

/// Loss only (no gradients) for an arbitrary predictor: mean over the
/// batch of per-sample mean squared error between prediction and target.
pub fn batch_loss(predictor: &impl NoisePredictor, batch: &[LossSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("loss batch must be non-empty".into()));
    }
    let mut total = 0.0;
    for sample in batch {
        let out = predictor.predict(&sample.input, sample.t)?;
        if out.len() != sample.target.len() {
            return Err(Error::Dimension(format!(
                "prediction length {} != target length {}",
                out.len(),
                sample.target.len()
            )));
        }
        let mut acc = 0.0;
        for (&o, &e) in out.iter().zip(&sample.target) {
            let d = o - e;
            acc += d * d;
        }
        total += acc / out.len() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Loss and exact parameter gradients for the trained denoiser.
pub fn noise_prediction_loss(net: &Denoiser, batch: &[LossSample]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Config("loss batch must be non-empty".into()));
    }
    let mut grads = Gradients {
        tensors: net.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
    };
    let mut total = 0.0;
    let batch_size = batch.len() as f64;
    for sample in batch {
        let (out, cache) = net.forward_cached(&sample.input, sample.t)?;
        if out.len() != sample.target.len() {
            return Err(Error::Dimension(format!(
                "prediction length {} != target length {}",
                out.len(),
                sample.target.len()
            )));
        }
        let numel = out.len() as f64;
        let mut acc = 0.0;
        let upstream: Vec<f64> = out
            .iter()
            .zip(&sample.target)
            .map(|(&o, &e)| {
                let d = o - e;
                acc += d * d;
                2.0 * d / (numel * batch_size)
            })
            .collect();
        total += acc / numel;
        net.backward_cached(&cache, &upstream, &mut grads);
    }
    Ok((total / batch_size, grads))
}

/// Standard-form training loss (mean squared error between the drawn
/// noise and the prediction on the closed-form noised input), with exact
/// gradients.
pub fn training_loss(net: &Denoiser, batch: &[DiffusionSample]) -> Result<(f64, Gradients)> {
    let samples: Vec<LossSample> = batch.iter().map(LossSample::from).collect();
    noise_prediction_loss(net, &samples)
}

const OVERFLOW_LIMIT: f64 = 1e12;

fn check_overflow(values: &[f64], t: usize) -> Result<()> {
    let mut max_abs = 0.0f64;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::Overflow {
                t,
                max_abs: f64::INFINITY,
            });
        }
        max_abs = max_abs.max(v.abs());
    }
    if max_abs > OVERFLOW_LIMIT {
        return Err(Error::Overflow { t, max_abs });
    }
    Ok(())
}

/// One ancestral reverse step at index `t`:
/// `mean = (xt - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)`,
/// plus `sqrt(beta_t) * z` noise except at the final step (t = 0).
pub fn p_sample_step(
    predictor: &impl NoisePredictor,
    xt: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    stream: &mut Stream,
) -> Result<Vec<f64>> {
    if t >= schedule.len() {
        return Err(Error::Index(format!(
            "t = {t} out of range (schedule length {})",
            schedule.len()
        )));
    }
    let eps_hat = predictor.predict(xt, t)?;
    let beta = schedule.beta[t];
    let alpha = schedule.alpha[t];
    let alpha_bar = schedule.alpha_bar[t];
    let coef = beta / (1.0 - alpha_bar).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let sigma = beta.sqrt();
    let mut out = Vec::with_capacity(xt.len());
    for (&x, &e) in xt.iter().zip(&eps_hat) {
        let mean = (x - coef * e) * inv_sqrt_alpha;
        let v = if t == 0 {
            mean
        } else {
            mean + sigma * stream.normal()
        };
        out.push(v);
    }
    check_overflow(&out, t)?;
    Ok(out)
}

/// One-shot residual destriping: subtract the scaled noise prediction,
/// `out = striped - sqrt(1 - alpha_bar[t_probe]) * eps_hat`.
pub fn destripe_residual(
    predictor: &impl NoisePredictor,
    striped: &CubePatch,
    t_probe: usize,
    schedule: &NoiseSchedule,
) -> Result<CubePatch> {
    if t_probe >= schedule.len() {
        return Err(Error::Index(format!(
            "t_probe = {t_probe} out of range (schedule length {})",
            schedule.len()
        )));
    }
    let input = striped.values_f64();
    let eps_hat = predictor.predict(&input, t_probe)?;
    let scale = (1.0 - schedule.alpha_bar[t_probe]).sqrt();
    let values: Vec<f32> = input
        .iter()
        .zip(&eps_hat)
        .map(|(&x, &e)| (x - scale * e) as f32)
        .collect();
    CubePatch::new(striped.index, values, striped.source_id.clone())
}

/// Image-to-image destriping: noise the input to level `t0` with the
/// closed form, then run `t0` ancestral steps back down to 0.
/// `t0 = 0` is the degenerate chain (no noise, no steps).
pub fn destripe_iterative(
    predictor: &impl NoisePredictor,
    striped: &CubePatch,
    t0: usize,
    schedule: &NoiseSchedule,
    stream: &mut Stream,
) -> Result<CubePatch> {
    if t0 >= schedule.len() {
        return Err(Error::Index(format!(
            "t0 = {t0} out of range (schedule length {})",
            schedule.len()
        )));
    }
    let x0 = striped.values_f64();
    let mut x = if t0 == 0 {
        x0
    } else {
        let eps: Vec<f64> = (0..x0.len()).map(|_| stream.normal()).collect();
        q_sample(&x0, t0 - 1, &eps, schedule)?
    };
    for t in (0..t0).rev() {
        x = p_sample_step(predictor, &x, t, schedule, stream)?;
    }
    let values: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    CubePatch::new(striped.index, values, striped.source_id.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datacube::PatchIndex;
    use crate::denoiser::DenoiserConfig;

    fn patch_from(values: Vec<f32>, extent: usize) -> CubePatch {
        CubePatch::new(
            PatchIndex {
                line0: 0,
                sample0: 0,
                band0: 0,
                extent,
            },
            values,
            "test",
        )
        .unwrap()
    }

    /// Predictor that always returns zero: reverse steps only rescale.
    struct ZeroPredictor;
    impl NoisePredictor for ZeroPredictor {
        fn predict(&self, xt: &[f64], _t: usize) -> Result<Vec<f64>> {
            Ok(vec![0.0; xt.len()])
        }
    }

    /// Predictor that returns a fixed field regardless of input.
    struct FixedPredictor(Vec<f64>);
    impl NoisePredictor for FixedPredictor {
        fn predict(&self, _xt: &[f64], _t: usize) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.02, 0.5, ScheduleKind::Linear).unwrap();
        assert_eq!(s.beta, vec![0.02]);
        assert_eq!(s.alpha_bar, vec![0.98]);
    }

    #[test]
    fn constant_beta_product() {
        let s = make_schedule(3, 0.02, 0.02, ScheduleKind::Linear).unwrap();
        let expected = [0.98, 0.9604, 0.941192];
        for (a, e) in s.alpha_bar.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn alpha_bar_is_strictly_decreasing() {
        let s = make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        for pair in s.alpha_bar.windows(2) {
            assert!(pair[1] < pair[0]);
        }
        // Recomputing the product in reverse order agrees closely.
        for (t, &ab) in s.alpha_bar.iter().enumerate() {
            let mut product = 1.0;
            for &a in s.alpha[..=t].iter().rev() {
                product *= a;
            }
            assert!((product - ab).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(make_schedule(0, 1e-4, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.0, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.03, 0.02, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.5, 1.0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn q_sample_identity_limit() {
        // A nearly-zero beta keeps alpha_bar at 1 within f64, so the
        // sample reduces to x0.
        let s = NoiseSchedule::from_betas(vec![1e-18]).unwrap();
        let x0 = vec![0.3, -1.2, 4.0];
        let eps = vec![1.0, 1.0, 1.0];
        let xt = q_sample(&x0, 0, &eps, &s).unwrap();
        for (a, b) in xt.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn q_sample_direct_value() {
        // alpha_bar = 0.75: x0 = 0, eps = 1 -> 0.5 everywhere.
        let s = NoiseSchedule::from_betas(vec![0.25]).unwrap();
        let xt = q_sample(&[0.0, 0.0], 0, &[1.0, 1.0], &s).unwrap();
        for v in xt {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn q_sample_variance_matches_closed_form() {
        let s = make_schedule(50, 1e-3, 0.05, ScheduleKind::Linear).unwrap();
        let t = 30;
        let n = 100_000;
        let mut stream = Stream::new(1);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let v = q_sample(&[0.0], t, &[stream.normal()], &s).unwrap()[0];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let expected = 1.0 - s.alpha_bar[t];
        assert!(
            (var - expected).abs() / expected < 0.02,
            "var {var} vs {expected}"
        );
    }

    #[test]
    fn sequential_simulation_matches_closed_form() {
        // Iterate the single-step definition x_t = sqrt(1-beta_t) x_{t-1}
        // + sqrt(beta_t) e_t and compare the final mean/variance with the
        // closed form.
        let s = make_schedule(40, 1e-3, 0.04, ScheduleKind::Linear).unwrap();
        let x0 = 1.0;
        let n = 100_000;
        let mut stream = Stream::new(2);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let mut x = x0;
            for t in 0..s.len() {
                x = (1.0 - s.beta[t]).sqrt() * x + s.beta[t].sqrt() * stream.normal();
            }
            sum += x;
            sumsq += x * x;
        }
        let t_final = s.len() - 1;
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let expected_mean = s.alpha_bar[t_final].sqrt() * x0;
        let expected_var = 1.0 - s.alpha_bar[t_final];
        assert!(
            (mean - expected_mean).abs() / expected_mean.abs() < 0.02,
            "mean {mean} vs {expected_mean}"
        );
        assert!(
            (var - expected_var).abs() / expected_var < 0.02,
            "var {var} vs {expected_var}"
        );
    }

    #[test]
    fn loss_is_zero_when_prediction_equals_target() {
        // Feed the network's own output back as the target.
        let net = Denoiser::init_random(DenoiserConfig::tiny(4, 8, 3)).unwrap();
        let mut stream = Stream::new(4);
        let input: Vec<f64> = (0..64).map(|_| stream.normal()).collect();
        let target = net.forward(&input, 2).unwrap();
        let batch = [LossSample {
            input,
            t: 2,
            target,
        }];
        let (loss, grads) = noise_prediction_loss(&net, &batch).unwrap();
        assert_eq!(loss, 0.0);
        for g in &grads.tensors {
            assert!(g.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_net_loss_is_target_mean_square() {
        let net = Denoiser::init_random(DenoiserConfig::tiny(4, 8, 5))
            .unwrap()
            .zeroed();
        // Target with unit mean square.
        let mut target = vec![1.0f64; 64];
        for (i, v) in target.iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -1.0;
            }
        }
        let batch = [LossSample {
            input: vec![0.25; 64],
            t: 0,
            target,
        }];
        let (loss, _) = noise_prediction_loss(&net, &batch).unwrap();
        assert!((loss - 1.0).abs() < 1e-15, "{loss}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let net = Denoiser::init_random(DenoiserConfig::tiny(4, 8, 6)).unwrap();
        let schedule = make_schedule(8, 1e-3, 0.05, ScheduleKind::Linear).unwrap();
        let mut stream = Stream::new(7);
        let mut batch = Vec::new();
        for t in [1usize, 5] {
            let x0: Vec<f64> = (0..64).map(|_| stream.uniform(-1.0, 1.0)).collect();
            let eps: Vec<f64> = (0..64).map(|_| stream.normal()).collect();
            batch.push(DiffusionSample::new(x0, t, eps, &schedule).unwrap());
        }
        let (_, analytic) = training_loss(&net, &batch).unwrap();
        let h = 1e-4;
        for (ti, tensor) in net.tensors.iter().enumerate() {
            if tensor.frozen {
                continue;
            }
            for p in 0..tensor.numel() {
                let mut plus = net.clone();
                plus.tensors[ti].data[p] += h;
                let (lp, _) = training_loss(&plus, &batch).unwrap();
                let mut minus = net.clone();
                minus.tensors[ti].data[p] -= h;
                let (lm, _) = training_loss(&minus, &batch).unwrap();
                let numeric = (lp - lm) / (2.0 * h);
                let a = analytic.tensors[ti][p];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    rel < 1e-4,
                    "{}[{p}]: analytic {a:.10e} vs numeric {numeric:.10e}",
                    tensor.name
                );
            }
        }
    }

    #[test]
    fn p_sample_deterministic_part_matches_scalar_oracle() {
        // Fixed eps_hat: the mean of the step must equal the posterior
        // mean computed by a standalone scalar formula.
        let s = make_schedule(10, 1e-3, 0.05, ScheduleKind::Linear).unwrap();
        let t = 6usize;
        let xt = vec![0.8f64, -0.4, 1.5, 0.0];
        let eps_hat = vec![0.3f64, 0.1, -0.2, 0.9];
        let got = p_sample_step(
            &FixedPredictor(eps_hat.clone()),
            &xt,
            0, // t = 0: no added noise, pure mean
            &s,
            &mut Stream::new(8),
        )
        .unwrap();
        for (i, &x) in xt.iter().enumerate() {
            let expected =
                (x - s.beta[0] / (1.0 - s.alpha_bar[0]).sqrt() * eps_hat[i]) / s.alpha[0].sqrt();
            assert!((got[i] - expected).abs() < 1e-9);
        }
        // Same check at a later t via two runs with the same seed: the
        // noise draw is identical, so the difference isolates the mean.
        let a = p_sample_step(&FixedPredictor(eps_hat.clone()), &xt, t, &s, &mut Stream::new(9))
            .unwrap();
        let b =
            p_sample_step(&FixedPredictor(vec![0.0; 4]), &xt, t, &s, &mut Stream::new(9)).unwrap();
        for i in 0..4 {
            let expected_diff =
                -s.beta[t] / (1.0 - s.alpha_bar[t]).sqrt() * eps_hat[i] / s.alpha[t].sqrt();
            assert!(((a[i] - b[i]) - expected_diff).abs() < 1e-9);
        }
    }

    #[test]
    fn final_step_is_deterministic() {
        let s = make_schedule(5, 1e-3, 0.05, ScheduleKind::Linear).unwrap();
        let xt = vec![0.3f64; 8];
        let a = p_sample_step(&ZeroPredictor, &xt, 0, &s, &mut Stream::new(10)).unwrap();
        let b = p_sample_step(&ZeroPredictor, &xt, 0, &s, &mut Stream::new(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_predictor_small_beta_is_near_identity() {
        let s = NoiseSchedule::from_betas(vec![1e-12]).unwrap();
        let xt = vec![0.7f64, -0.2];
        let out = p_sample_step(&ZeroPredictor, &xt, 0, &s, &mut Stream::new(12)).unwrap();
        for (o, x) in out.iter().zip(&xt) {
            assert!((o - x).abs() < 1e-9);
        }
    }

    #[test]
    fn overflow_is_flagged_with_step() {
        let s = NoiseSchedule::from_betas(vec![0.5]).unwrap();
        let huge = vec![1e300f64; 4];
        match p_sample_step(&ZeroPredictor, &huge, 0, &s, &mut Stream::new(13)) {
            Err(Error::Overflow { t, .. }) => assert_eq!(t, 0),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn residual_zero_predictor_is_identity() {
        let s = make_schedule(10, 1e-3, 0.05, ScheduleKind::Linear).unwrap();
        let striped = patch_from(vec![0.5; 27], 3);
        let out = destripe_residual(&ZeroPredictor, &striped, 5, &s).unwrap();
        assert_eq!(out.values, striped.values);
    }

    #[test]
    fn residual_exact_field_with_unit_scale_recovers_clean() {
        // The largest beta below 1 pushes the subtraction scale to 1
        // within one ulp.
        let s = NoiseSchedule::from_betas(vec![1.0 - f64::EPSILON / 2.0]).unwrap();
        assert!((1.0 - s.alpha_bar[0]).sqrt() > 1.0 - 1e-15);
        let clean: Vec<f32> = (0..27).map(|i| 0.2 + 0.01 * i as f32).collect();
        let field: Vec<f64> = (0..27).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.05).collect();
        let striped: Vec<f32> = clean
            .iter()
            .zip(&field)
            .map(|(&c, &f)| (c as f64 + f) as f32)
            .collect();
        let patch = patch_from(striped, 3);
        let out = destripe_residual(&FixedPredictor(field), &patch, 0, &s).unwrap();
        for (o, c) in out.values.iter().zip(&clean) {
            assert!((o - c).abs() < 1e-6, "{o} vs {c}");
        }
    }

    #[test]
    fn iterative_t0_zero_is_identity() {
        let s = make_schedule(10, 1e-3, 0.05, ScheduleKind::Linear).unwrap();
        let striped = patch_from(vec![0.4; 27], 3);
        let out =
            destripe_iterative(&ZeroPredictor, &striped, 0, &s, &mut Stream::new(14)).unwrap();
        assert_eq!(out.values, striped.values);
    }

    #[test]
    fn iterative_same_seed_is_identical() {
        let s = make_schedule(20, 1e-3, 0.05, ScheduleKind::Linear).unwrap();
        let striped = patch_from((0..64).map(|i| i as f32 / 64.0).collect(), 4);
        let a = destripe_iterative(&ZeroPredictor, &striped, 10, &s, &mut Stream::new(15)).unwrap();
        let b = destripe_iterative(&ZeroPredictor, &striped, 10, &s, &mut Stream::new(15)).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn schedule_csv_has_header_and_rows() {
        let s = make_schedule(4, 1e-3, 0.02, ScheduleKind::Linear).unwrap();
        let csv = s.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "t,beta,alpha,alpha_bar");
        assert!(lines[1].starts_with("0,0.001,"));
    }
}
