//! Hyperspectral datacube destriping toolkit.
//!
//! The crate covers the full desk-scale pipeline for removing pushbroom
//! stripe artifacts from hyperspectral radiance cubes:
//!
//! 1. **Cube handling** ([`datacube`]): ENVI-style BSQ/BIL/BIP I/O,
//!    per-band normalization, random 3D patch sampling and mean-blended
//!    reassembly.
//! 2. **Synthetic stripes** ([`stripesynth`]): a deterministic, per-band
//!    stripe-noise generator with fragmented columns and dynamic-range
//!    scaled Gaussian intensity.
//! 3. **Augmentation** ([`augment`]): spectral-band Mixup/CutMix convex
//!    blending.
//! 4. **Diffusion engine** ([`diffusion`], [`denoiser`]): a variance
//!    schedule with closed-form forward noising, a small 3D convolutional
//!    U-Net noise predictor with exact hand-written gradients, ancestral
//!    sampling, and two destriping inference modes.
//! 5. **Training** ([`trainer`]): Adam with cosine learning-rate decay and
//!    the three-stage schedule (2D weight inflation, denoising pre-training,
//!    stripe fine-tuning).
//! 6. **Metrics** ([`metrics`]): PSNR, SSIM and spectral angle reports.
//!
//! Every random decision flows from a 64-bit seed through counter-based
//! splittable streams ([`rng::Stream`]), so reruns are bit-identical and
//! band-level work can be parallelized without changing results.
//!
//! The `hsidiff` binary exposes the batch surface (`synth`, `train`,
//! `destripe`, `eval`, `schedule-dump`); see the crate examples for
//! library-first usage of each capability.

// `!(x > 0.0)` style guards are deliberate: they reject NaN along with
// non-positive values. Indexed loops are the clearest form for the
// convolution kernels and map tables.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]
#![allow(clippy::manual_is_multiple_of)]

pub mod augment;
pub mod cli;
pub mod datacube;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod stripesynth;
pub mod trainer;
pub mod util;

pub use datacube::{CubePatch, HyperCube, Interleave, PatchIndex};
pub use denoiser::{
    apply_kernel3d, inflate_2d_to_3d, Denoiser, DenoiserConfig, InflateMode, Kernel2D, Kernel3D,
};
pub use diffusion::{NoisePredictor, NoiseSchedule};
pub use error::{Error, Result};
pub use metrics::MetricReport;
pub use rng::Stream;
pub use stripesynth::{StripeConfig, StripeRealization};
pub use trainer::{StageConfig, StageId};
