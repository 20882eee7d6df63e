//! The noise predictor: a small 3D convolutional encoder-decoder with an
//! additive time embedding, plus the 2D-to-3D weight inflation operator.
//!
//! Patches are (line, sample, band) volumes; convolutions pad with
//! reflection on the two spatial axes and replication on the spectral
//! axis. All arithmetic is f64 and every op has a hand-written exact
//! backward, verified against central finite differences.
//!
//! Architecture (two levels): per level `convs_per_level` 3x3x3 convs
//! with SiLU, a 2x average-pool between levels, nearest-neighbor
//! upsampling back, a channel concat skip from the first level, and a
//! final projection conv. The sinusoidal time table is projected per
//! level and added channel-wise after the level's first conv.

mod checkpoint;

pub use checkpoint::{load_tensors, save_tensors, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::rng::Stream;

/// 2D convolution kernel, laid out `[m][n][c_in][c_out]`.
#[derive(Debug, Clone)]
pub struct Kernel2D {
    pub m: usize,
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Kernel2D {
    pub fn new(m: usize, n: usize, c_in: usize, c_out: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if m % 2 == 0 || n % 2 == 0 {
            return Err(Error::Config(format!(
                "2D kernel sides must be odd, got {m}x{n}"
            )));
        }
        if weights.len() != m * n * c_in * c_out || bias.len() != c_out {
            return Err(Error::Dimension(format!(
                "2D kernel buffers do not match {m}x{n}x{c_in}x{c_out}"
            )));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("2D kernel contains non-finite values".into()));
        }
        Ok(Kernel2D { m, n, c_in, c_out, weights, bias })
    }

    #[inline]
    pub fn at(&self, km: usize, kn: usize, i: usize, o: usize) -> f64 {
        self.weights[((km * self.n + kn) * self.c_in + i) * self.c_out + o]
    }
}

/// 3D convolution kernel, laid out `[m][n][l][c_in][c_out]` with `l` the
/// spectral depth.
#[derive(Debug, Clone)]
pub struct Kernel3D {
    pub m: usize,
    pub n: usize,
    pub l: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Kernel3D {
    #[inline]
    pub fn at(&self, km: usize, kn: usize, kl: usize, i: usize, o: usize) -> f64 {
        self.weights[(((km * self.n + kn) * self.l + kl) * self.c_in + i) * self.c_out + o]
    }
}

/// How 2D filters are replicated across the new spectral depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InflateMode {
    /// Each slice gets `W2D / l`: a 3D convolution over a spectrally
    /// constant input reproduces the 2D convolution output exactly.
    Normalized,
    /// Each slice gets `W2D` verbatim; the same input yields `l` times
    /// the 2D output.
    Literal,
}

/// Expand a 2D kernel into the spectral domain with depth `l` (odd).
/// Bias is copied unchanged.
pub fn inflate_2d_to_3d(k2: &Kernel2D, l: usize, mode: InflateMode) -> Result<Kernel3D> {
    if l == 0 || l % 2 == 0 {
        return Err(Error::Config(format!("spectral depth must be odd, got {l}")));
    }
    let scale = match mode {
        InflateMode::Normalized => 1.0 / l as f64,
        InflateMode::Literal => 1.0,
    };
    let mut weights = vec![0.0; k2.m * k2.n * l * k2.c_in * k2.c_out];
    for km in 0..k2.m {
        for kn in 0..k2.n {
            for kl in 0..l {
                for i in 0..k2.c_in {
                    for o in 0..k2.c_out {
                        weights[(((km * k2.n + kn) * l + kl) * k2.c_in + i) * k2.c_out + o] =
                            k2.at(km, kn, i, o) * scale;
                    }
                }
            }
        }
    }
    Ok(Kernel3D {
        m: k2.m,
        n: k2.n,
        l,
        c_in: k2.c_in,
        c_out: k2.c_out,
        weights,
        bias: k2.bias.clone(),
    })
}

/// Network hyperparameters. The default is the toy two-level U-Net used
/// for end-to-end runs; [`DenoiserConfig::tiny`] is the smallest net that
/// still exercises the time embedding, used for exhaustive gradient
/// checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserConfig {
    /// Input patch edge; forward input must be `extent^3` voxels.
    pub extent: usize,
    /// Channels at the first resolution level; the second level doubles.
    pub base_channels: usize,
    /// Resolution levels: 1 (no pooling) or 2.
    pub levels: usize,
    /// Convolutions per encoder/decoder level: 1 or 2.
    pub convs_per_level: usize,
    /// Sinusoidal embedding width (even).
    pub time_embed_dim: usize,
    /// Schedule length the time table covers.
    pub t_count: usize,
    /// Convolution kernel side (odd).
    pub kernel: usize,
    /// Weight initialization seed.
    pub seed: u64,
}

impl DenoiserConfig {
    pub fn toy(extent: usize, t_count: usize, seed: u64) -> Self {
        DenoiserConfig {
            extent,
            base_channels: 8,
            levels: 2,
            convs_per_level: 2,
            time_embed_dim: 16,
            t_count,
            kernel: 3,
            seed,
        }
    }

    /// Two convolution layers, one level: small enough to finite-difference
    /// every parameter.
    pub fn tiny(extent: usize, t_count: usize, seed: u64) -> Self {
        DenoiserConfig {
            extent,
            base_channels: 4,
            levels: 1,
            convs_per_level: 1,
            time_embed_dim: 8,
            t_count,
            kernel: 3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent < 2 {
            return Err(Error::Config(format!("extent must be >= 2, got {}", self.extent)));
        }
        if !(1..=2).contains(&self.levels) {
            return Err(Error::Config(format!("levels must be 1 or 2, got {}", self.levels)));
        }
        if self.levels == 2 && self.extent % 2 != 0 {
            return Err(Error::Config(format!(
                "extent must be even with two levels, got {}",
                self.extent
            )));
        }
        if !(1..=2).contains(&self.convs_per_level) {
            return Err(Error::Config(format!(
                "convs_per_level must be 1 or 2, got {}",
                self.convs_per_level
            )));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::Config(format!("kernel side must be odd, got {}", self.kernel)));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be even and positive, got {}",
                self.time_embed_dim
            )));
        }
        if self.t_count == 0 {
            return Err(Error::Config("t_count must be >= 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Frozen tensors receive exactly-zero gradients and are skipped by
    /// the optimizer.
    pub frozen: bool,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Conv layer description within the fixed layer chain.
#[derive(Debug, Clone)]
struct ConvSpec {
    name: String,
    c_in: usize,
    c_out: usize,
}

/// Gradients parallel to [`Denoiser::tensors`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(net: &Denoiser) -> Self {
        Gradients {
            tensors: net.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.tensors {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// The noise predictor's parameters and layer chain.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub tensors: Vec<Tensor>,
}

const TIME_TABLE: &str = "time.table";

impl Denoiser {
    fn conv_specs(config: &DenoiserConfig) -> Vec<ConvSpec> {
        let c = config.base_channels;
        let mut specs = Vec::new();
        for j in 0..config.convs_per_level {
            specs.push(ConvSpec {
                name: format!("enc0.conv{j}"),
                c_in: if j == 0 { 1 } else { c },
                c_out: c,
            });
        }
        if config.levels == 2 {
            for j in 0..config.convs_per_level {
                specs.push(ConvSpec {
                    name: format!("enc1.conv{j}"),
                    c_in: if j == 0 { c } else { 2 * c },
                    c_out: 2 * c,
                });
            }
            for j in 0..config.convs_per_level {
                specs.push(ConvSpec {
                    name: format!("dec0.conv{j}"),
                    c_in: if j == 0 { 3 * c } else { c },
                    c_out: c,
                });
            }
        }
        specs.push(ConvSpec {
            name: "out".into(),
            c_in: c,
            c_out: 1,
        });
        specs
    }

    /// Random initialization: uniform(-s, s) with s = sqrt(1 / fan_in).
    pub fn init_random(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let root = Stream::new(config.seed);
        let k = config.kernel;
        let mut tensors = Vec::new();
        for (li, spec) in Self::conv_specs(&config).iter().enumerate() {
            let fan_in = (spec.c_in * k * k * k) as f64;
            let s = (1.0 / fan_in).sqrt();
            let mut stream = root.fork(li as u64);
            let weights: Vec<f64> = (0..k * k * k * spec.c_in * spec.c_out)
                .map(|_| stream.uniform(-s, s))
                .collect();
            tensors.push(Tensor {
                name: format!("{}.weight", spec.name),
                shape: vec![k, k, k, spec.c_in, spec.c_out],
                data: weights,
                frozen: false,
            });
            tensors.push(Tensor {
                name: format!("{}.bias", spec.name),
                shape: vec![spec.c_out],
                data: vec![0.0; spec.c_out],
                frozen: false,
            });
        }
        Self::push_time_tensors(&config, &root, &mut tensors);
        Ok(Denoiser { config, tensors })
    }

    /// Build from pretrained 2D kernels: every conv layer in the chain is
    /// inflated from the source with the matching name; time-embedding
    /// projections are randomly initialized from the config seed.
    pub fn init_from_2d(
        config: DenoiserConfig,
        sources: &[(String, Kernel2D)],
        mode: InflateMode,
    ) -> Result<Self> {
        config.validate()?;
        let root = Stream::new(config.seed);
        let k = config.kernel;
        let mut tensors = Vec::new();
        for spec in Self::conv_specs(&config) {
            let (_, k2) = sources
                .iter()
                .find(|(name, _)| *name == spec.name)
                .ok_or_else(|| Error::Inflation {
                    layer: spec.name.clone(),
                    detail: "no 2D source kernel with this name".into(),
                })?;
            if k2.m != k || k2.n != k || k2.c_in != spec.c_in || k2.c_out != spec.c_out {
                return Err(Error::Inflation {
                    layer: spec.name.clone(),
                    detail: format!(
                        "2D source is {}x{}x{}x{}, layer needs {k}x{k}x{}x{}",
                        k2.m, k2.n, k2.c_in, k2.c_out, spec.c_in, spec.c_out
                    ),
                });
            }
            let k3 = inflate_2d_to_3d(k2, k, mode)?;
            tensors.push(Tensor {
                name: format!("{}.weight", spec.name),
                shape: vec![k, k, k, spec.c_in, spec.c_out],
                data: k3.weights,
                frozen: false,
            });
            tensors.push(Tensor {
                name: format!("{}.bias", spec.name),
                shape: vec![spec.c_out],
                data: k3.bias,
                frozen: false,
            });
        }
        Self::push_time_tensors(&config, &root, &mut tensors);
        Ok(Denoiser { config, tensors })
    }

    fn push_time_tensors(config: &DenoiserConfig, root: &Stream, tensors: &mut Vec<Tensor>) {
        let d = config.time_embed_dim;
        let mut table = vec![0.0; config.t_count * d];
        for t in 0..config.t_count {
            for i in 0..d / 2 {
                let omega = 10000f64.powf(-2.0 * i as f64 / d as f64);
                table[t * d + 2 * i] = (t as f64 * omega).sin();
                table[t * d + 2 * i + 1] = (t as f64 * omega).cos();
            }
        }
        tensors.push(Tensor {
            name: TIME_TABLE.into(),
            shape: vec![config.t_count, d],
            data: table,
            frozen: true,
        });
        for level in 0..config.levels {
            let channels = config.base_channels << level;
            let s = (1.0 / d as f64).sqrt();
            let mut stream = root.fork(1000 + level as u64);
            tensors.push(Tensor {
                name: format!("time.proj{level}.weight"),
                shape: vec![d, channels],
                data: (0..d * channels).map(|_| stream.uniform(-s, s)).collect(),
                frozen: false,
            });
            tensors.push(Tensor {
                name: format!("time.proj{level}.bias"),
                shape: vec![channels],
                data: vec![0.0; channels],
                frozen: false,
            });
        }
    }

    /// Rebuild from a tensor list (checkpoint load). Shapes are validated
    /// against the chain derived from `config`.
    pub fn from_tensors(config: DenoiserConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let reference = Self::init_random(config)?;
        if tensors.len() != reference.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                reference.tensors.len(),
                tensors.len()
            )));
        }
        let mut ordered = Vec::with_capacity(tensors.len());
        for expected in &reference.tensors {
            let found = tensors
                .iter()
                .find(|t| t.name == expected.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", expected.name)))?;
            if found.shape != expected.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    expected.name, found.shape, expected.shape
                )));
            }
            ordered.push(Tensor {
                name: expected.name.clone(),
                shape: expected.shape.clone(),
                data: found.data.clone(),
                frozen: expected.frozen,
            });
        }
        Ok(Denoiser { config, tensors: ordered })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn set_tensor_data(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let t = self
            .tensors
            .iter_mut()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("no tensor `{name}`")))?;
        if data.len() != t.numel() {
            return Err(Error::Dimension(format!(
                "tensor `{name}` expects {} values, got {}",
                t.numel(),
                data.len()
            )));
        }
        t.data.copy_from_slice(data);
        Ok(())
    }

    /// All parameters set to zero (useful as an identity probe: the
    /// network output is exactly zero everywhere).
    pub fn zeroed(mut self) -> Self {
        for t in &mut self.tensors {
            if !t.frozen {
                t.data.fill(0.0);
            }
        }
        self
    }

    pub fn trainable_param_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| !t.frozen)
            .map(Tensor::numel)
            .sum()
    }

    fn tensor_index(&self, name: &str) -> usize {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .unwrap_or_else(|| panic!("tensor `{name}` missing from chain"))
    }

    /// Noise prediction, same shape as the input.
    pub fn forward(&self, xt: &[f64], t: usize) -> Result<Vec<f64>> {
        Ok(self.forward_cached(xt, t)?.0)
    }

    pub(crate) fn forward_cached(&self, xt: &[f64], t: usize) -> Result<(Vec<f64>, Cache)> {
        let e = self.config.extent;
        if xt.len() != e * e * e {
            return Err(Error::Dimension(format!(
                "input length {} != extent^3 = {}",
                xt.len(),
                e * e * e
            )));
        }
        if t >= self.config.t_count {
            return Err(Error::Index(format!(
                "t = {t} out of range (t_count = {})",
                self.config.t_count
            )));
        }
        let c = self.config.base_channels;
        let cpl = self.config.convs_per_level;
        let dims0 = (e, e, e);
        let mut cache = Cache {
            t,
            enc0: Vec::new(),
            skip: None,
            enc1: Vec::new(),
            dec0: Vec::new(),
            out_input: Vec::new(),
        };

        // Level 0 encoder.
        let mut act = xt.to_vec();
        for j in 0..cpl {
            let name = format!("enc0.conv{j}");
            let (c_in, c_out) = (if j == 0 { 1 } else { c }, c);
            let mut pre = self.conv_forward(&name, &act, c_in, c_out, dims0)?;
            if j == 0 {
                let add = self.time_add(0, t);
                add_channelwise(&mut pre, &add, dims0);
            }
            let post = silu(&pre);
            self.check_finite(&name, &post)?;
            cache.enc0.push(ConvCache { input: act, pre_act: pre });
            act = post;
        }

        if self.config.levels == 2 {
            cache.skip = Some(act.clone());
            let dims1 = (e / 2, e / 2, e / 2);
            act = avgpool2_forward(&act, c, dims0);
            for j in 0..cpl {
                let name = format!("enc1.conv{j}");
                let (c_in, c_out) = (if j == 0 { c } else { 2 * c }, 2 * c);
                let mut pre = self.conv_forward(&name, &act, c_in, c_out, dims1)?;
                if j == 0 {
                    let add = self.time_add(1, t);
                    add_channelwise(&mut pre, &add, dims1);
                }
                let post = silu(&pre);
                self.check_finite(&name, &post)?;
                cache.enc1.push(ConvCache { input: act, pre_act: pre });
                act = post;
            }
            let upsampled = upsample2_forward(&act, 2 * c, dims1);
            let skip = cache.skip.as_ref().expect("skip saved above");
            let mut concat = Vec::with_capacity((3 * c) * e * e * e);
            concat.extend_from_slice(skip);
            concat.extend_from_slice(&upsampled);
            act = concat;
            for j in 0..cpl {
                let name = format!("dec0.conv{j}");
                let (c_in, c_out) = (if j == 0 { 3 * c } else { c }, c);
                let pre = self.conv_forward(&name, &act, c_in, c_out, dims0)?;
                let post = silu(&pre);
                self.check_finite(&name, &post)?;
                cache.dec0.push(ConvCache { input: act, pre_act: pre });
                act = post;
            }
        }

        cache.out_input = act.clone();
        let out = self.conv_forward("out", &act, c, 1, dims0)?;
        self.check_finite("out", &out)?;
        Ok((out, cache))
    }

    /// Exact gradients of `<forward(xt, t), upstream>` with respect to
    /// every parameter. Frozen tensors get exactly-zero gradients.
    pub fn backward(&self, xt: &[f64], t: usize, upstream: &[f64]) -> Result<Gradients> {
        let (out, cache) = self.forward_cached(xt, t)?;
        if upstream.len() != out.len() {
            return Err(Error::Dimension(format!(
                "upstream length {} != output length {}",
                upstream.len(),
                out.len()
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        self.backward_cached(&cache, upstream, &mut grads);
        Ok(grads)
    }

    pub(crate) fn backward_cached(&self, cache: &Cache, upstream: &[f64], grads: &mut Gradients) {
        let e = self.config.extent;
        let c = self.config.base_channels;
        let cpl = self.config.convs_per_level;
        let dims0 = (e, e, e);

        // Output conv.
        let mut g = self.conv_backward("out", &cache.out_input, c, 1, dims0, upstream, grads);

        if self.config.levels == 2 {
            let dims1 = (e / 2, e / 2, e / 2);
            // Decoder convs in reverse.
            for j in (0..cpl).rev() {
                let name = format!("dec0.conv{j}");
                let (c_in, c_out) = (if j == 0 { 3 * c } else { c }, c);
                let cc = &cache.dec0[j];
                let g_pre = silu_backward(&cc.pre_act, &g);
                g = self.conv_backward(&name, &cc.input, c_in, c_out, dims0, &g_pre, grads);
            }
            // Split concat grad into skip part and upsampled part.
            let vol0 = e * e * e;
            let g_skip = g[..c * vol0].to_vec();
            let g_up = &g[c * vol0..];
            let mut g1 = upsample2_backward(g_up, 2 * c, dims1);
            // Level 1 encoder convs in reverse.
            for j in (0..cpl).rev() {
                let name = format!("enc1.conv{j}");
                let (c_in, c_out) = (if j == 0 { c } else { 2 * c }, 2 * c);
                let cc = &cache.enc1[j];
                let g_pre = silu_backward(&cc.pre_act, &g1);
                if j == 0 {
                    self.time_backward(1, cache.t, &g_pre, dims1, grads);
                }
                g1 = self.conv_backward(&name, &cc.input, c_in, c_out, dims1, &g_pre, grads);
            }
            // Pool backward, then join with the skip branch.
            let mut g0 = avgpool2_backward(&g1, c, dims0);
            for (a, b) in g0.iter_mut().zip(&g_skip) {
                *a += b;
            }
            g = g0;
        }

        // Level 0 encoder convs in reverse.
        for j in (0..cpl).rev() {
            let name = format!("enc0.conv{j}");
            let (c_in, c_out) = (if j == 0 { 1 } else { c }, c);
            let cc = &cache.enc0[j];
            let g_pre = silu_backward(&cc.pre_act, &g);
            if j == 0 {
                self.time_backward(0, cache.t, &g_pre, dims0, grads);
            }
            g = self.conv_backward(&name, &cc.input, c_in, c_out, dims0, &g_pre, grads);
        }
    }

    fn conv_forward(
        &self,
        name: &str,
        input: &[f64],
        c_in: usize,
        c_out: usize,
        dims: (usize, usize, usize),
    ) -> Result<Vec<f64>> {
        let w = &self.tensors[self.tensor_index(&format!("{name}.weight"))];
        let b = &self.tensors[self.tensor_index(&format!("{name}.bias"))];
        let k = self.config.kernel;
        Ok(conv3d_forward(
            &w.data,
            &b.data,
            (k, k, k),
            c_in,
            c_out,
            input,
            dims,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        name: &str,
        input: &[f64],
        c_in: usize,
        c_out: usize,
        dims: (usize, usize, usize),
        g_out: &[f64],
        grads: &mut Gradients,
    ) -> Vec<f64> {
        let wi = self.tensor_index(&format!("{name}.weight"));
        let bi = self.tensor_index(&format!("{name}.bias"));
        let w = self.tensors[wi].data.clone();
        let k = self.config.kernel;
        let (g_in, g_w, g_b) = conv3d_backward(&w, (k, k, k), c_in, c_out, input, dims, g_out);
        accumulate(&mut grads.tensors[wi], &g_w);
        accumulate(&mut grads.tensors[bi], &g_b);
        g_in
    }

    /// Per-channel additive embedding for a level: `proj^T table[t] + bias`.
    fn time_add(&self, level: usize, t: usize) -> Vec<f64> {
        let d = self.config.time_embed_dim;
        let table = &self.tensors[self.tensor_index(TIME_TABLE)].data;
        let w = &self.tensors[self.tensor_index(&format!("time.proj{level}.weight"))];
        let b = &self.tensors[self.tensor_index(&format!("time.proj{level}.bias"))];
        let channels = b.numel();
        let emb = &table[t * d..(t + 1) * d];
        let mut add = b.data.clone();
        for (j, &ej) in emb.iter().enumerate() {
            for (ch, a) in add.iter_mut().enumerate().take(channels) {
                *a += ej * w.data[j * channels + ch];
            }
        }
        add
    }

    fn time_backward(
        &self,
        level: usize,
        t: usize,
        g_pre: &[f64],
        dims: (usize, usize, usize),
        grads: &mut Gradients,
    ) {
        let d = self.config.time_embed_dim;
        let vol = dims.0 * dims.1 * dims.2;
        let wi = self.tensor_index(&format!("time.proj{level}.weight"));
        let bi = self.tensor_index(&format!("time.proj{level}.bias"));
        let ti = self.tensor_index(TIME_TABLE);
        let channels = self.tensors[bi].numel();
        // g_add[ch] = sum over the channel's voxels.
        let mut g_add = vec![0.0; channels];
        for (ch, ga) in g_add.iter_mut().enumerate() {
            let base = ch * vol;
            let mut acc = 0.0;
            for v in &g_pre[base..base + vol] {
                acc += v;
            }
            *ga = acc;
        }
        let table = &self.tensors[ti].data;
        let emb = &table[t * d..(t + 1) * d];
        for j in 0..d {
            for ch in 0..channels {
                grads.tensors[wi][j * channels + ch] += emb[j] * g_add[ch];
            }
        }
        for ch in 0..channels {
            grads.tensors[bi][ch] += g_add[ch];
        }
        if !self.tensors[ti].frozen {
            let w = &self.tensors[wi].data;
            for j in 0..d {
                let mut acc = 0.0;
                for ch in 0..channels {
                    acc += w[j * channels + ch] * g_add[ch];
                }
                grads.tensors[ti][t * d + j] += acc;
            }
        }
    }

    fn check_finite(&self, layer: &str, values: &[f64]) -> Result<()> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "non-finite activation after layer `{layer}`"
            )));
        }
        Ok(())
    }
}

/// Forward-pass intermediates needed for the exact backward.
pub(crate) struct Cache {
    t: usize,
    enc0: Vec<ConvCache>,
    skip: Option<Vec<f64>>,
    enc1: Vec<ConvCache>,
    dec0: Vec<ConvCache>,
    out_input: Vec<f64>,
}

struct ConvCache {
    input: Vec<f64>,
    pre_act: Vec<f64>,
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Reflect (no edge repeat) for spatial axes; single-row axes clamp.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    debug_assert!((0..n).contains(&i));
    i as usize
}

/// Replicate (clamp) for the spectral axis.
#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Per-tap index map for one axis: `maps[tap][coord]` is the source row.
type AxisMaps = Vec<Vec<usize>>;

fn border_maps(
    ksize: (usize, usize, usize),
    dims: (usize, usize, usize),
) -> (AxisMaps, AxisMaps, AxisMaps) {
    let (km_size, kn_size, kl_size) = ksize;
    let (nx, ny, nz) = dims;
    let (px, py, pz) = (
        (km_size / 2) as isize,
        (kn_size / 2) as isize,
        (kl_size / 2) as isize,
    );
    let map_x: Vec<Vec<usize>> = (0..km_size)
        .map(|kk| (0..nx).map(|x| reflect(x as isize + kk as isize - px, nx)).collect())
        .collect();
    let map_y: Vec<Vec<usize>> = (0..kn_size)
        .map(|kk| (0..ny).map(|y| reflect(y as isize + kk as isize - py, ny)).collect())
        .collect();
    let map_z: Vec<Vec<usize>> = (0..kl_size)
        .map(|kk| (0..nz).map(|z| clamp_index(z as isize + kk as isize - pz, nz)).collect())
        .collect();
    (map_x, map_y, map_z)
}

/// Same-size 3D convolution with reflect (spatial) / replicate (spectral)
/// borders. Weight layout `[m][n][l][c_in][c_out]`, volume layout
/// `[channel][x][y][z]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_forward(
    weights: &[f64],
    bias: &[f64],
    ksize: (usize, usize, usize),
    c_in: usize,
    c_out: usize,
    input: &[f64],
    dims: (usize, usize, usize),
) -> Vec<f64> {
    let (km_size, kn_size, kl_size) = ksize;
    let (nx, ny, nz) = dims;
    let vol = nx * ny * nz;
    let (map_x, map_y, map_z) = border_maps(ksize, dims);
    let mut out = vec![0.0; c_out * vol];
    for (o, &b) in bias.iter().enumerate() {
        out[o * vol..(o + 1) * vol].fill(b);
    }
    for i in 0..c_in {
        for o in 0..c_out {
            for km in 0..km_size {
                for kn in 0..kn_size {
                    for kl in 0..kl_size {
                        let w = weights
                            [(((km * kn_size + kn) * kl_size + kl) * c_in + i) * c_out + o];
                        let mz = &map_z[kl];
                        for x in 0..nx {
                            let mx = map_x[km][x];
                            for y in 0..ny {
                                let my = map_y[kn][y];
                                let in_row = ((i * nx + mx) * ny + my) * nz;
                                let out_row = ((o * nx + x) * ny + y) * nz;
                                for z in 0..nz {
                                    out[out_row + z] += w * input[in_row + mz[z]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Apply a [`Kernel3D`] to a `[c_in][x][y][z]` volume (same border rules
/// as the network convolutions).
pub fn apply_kernel3d(kernel: &Kernel3D, input: &[f64], dims: (usize, usize, usize)) -> Result<Vec<f64>> {
    let vol = dims.0 * dims.1 * dims.2;
    if input.len() != kernel.c_in * vol {
        return Err(Error::Dimension(format!(
            "input length {} != c_in * volume = {}",
            input.len(),
            kernel.c_in * vol
        )));
    }
    Ok(conv3d_forward(
        &kernel.weights,
        &kernel.bias,
        (kernel.m, kernel.n, kernel.l),
        kernel.c_in,
        kernel.c_out,
        input,
        dims,
    ))
}

/// Gradients of the convolution: (d/d input, d/d weights, d/d bias).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward(
    weights: &[f64],
    ksize: (usize, usize, usize),
    c_in: usize,
    c_out: usize,
    input: &[f64],
    dims: (usize, usize, usize),
    g_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (km_size, kn_size, kl_size) = ksize;
    let (nx, ny, nz) = dims;
    let vol = nx * ny * nz;
    let (map_x, map_y, map_z) = border_maps(ksize, dims);
    let mut g_in = vec![0.0; c_in * vol];
    let mut g_w = vec![0.0; weights.len()];
    let mut g_b = vec![0.0; c_out];
    for (o, gb) in g_b.iter_mut().enumerate() {
        let mut acc = 0.0;
        for v in &g_out[o * vol..(o + 1) * vol] {
            acc += v;
        }
        *gb = acc;
    }
    for i in 0..c_in {
        for o in 0..c_out {
            for km in 0..km_size {
                for kn in 0..kn_size {
                    for kl in 0..kl_size {
                        let widx = (((km * kn_size + kn) * kl_size + kl) * c_in + i) * c_out + o;
                        let w = weights[widx];
                        let mz = &map_z[kl];
                        let mut gw = 0.0;
                        for x in 0..nx {
                            let mx = map_x[km][x];
                            for y in 0..ny {
                                let my = map_y[kn][y];
                                let in_row = ((i * nx + mx) * ny + my) * nz;
                                let out_row = ((o * nx + x) * ny + y) * nz;
                                for z in 0..nz {
                                    let go = g_out[out_row + z];
                                    let src = in_row + mz[z];
                                    gw += go * input[src];
                                    g_in[src] += w * go;
                                }
                            }
                        }
                        g_w[widx] = gw;
                    }
                }
            }
        }
    }
    (g_in, g_w, g_b)
}

fn silu(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let s = 1.0 / (1.0 + (-v).exp());
            v * s
        })
        .collect()
}

fn silu_backward(pre_act: &[f64], g_out: &[f64]) -> Vec<f64> {
    pre_act
        .iter()
        .zip(g_out)
        .map(|(&v, &g)| {
            let s = 1.0 / (1.0 + (-v).exp());
            g * (s + v * s * (1.0 - s))
        })
        .collect()
}

fn add_channelwise(values: &mut [f64], add: &[f64], dims: (usize, usize, usize)) {
    let vol = dims.0 * dims.1 * dims.2;
    for (ch, &a) in add.iter().enumerate() {
        for v in &mut values[ch * vol..(ch + 1) * vol] {
            *v += a;
        }
    }
}

fn avgpool2_forward(input: &[f64], channels: usize, dims: (usize, usize, usize)) -> Vec<f64> {
    let (nx, ny, nz) = dims;
    let (hx, hy, hz) = (nx / 2, ny / 2, nz / 2);
    let mut out = vec![0.0; channels * hx * hy * hz];
    for ch in 0..channels {
        for x in 0..hx {
            for y in 0..hy {
                for z in 0..hz {
                    let mut acc = 0.0;
                    for dx in 0..2 {
                        for dy in 0..2 {
                            for dz in 0..2 {
                                acc += input
                                    [((ch * nx + 2 * x + dx) * ny + 2 * y + dy) * nz + 2 * z + dz];
                            }
                        }
                    }
                    out[((ch * hx + x) * hy + y) * hz + z] = acc / 8.0;
                }
            }
        }
    }
    out
}

fn avgpool2_backward(g_out: &[f64], channels: usize, dims: (usize, usize, usize)) -> Vec<f64> {
    let (nx, ny, nz) = dims;
    let (hx, hy, hz) = (nx / 2, ny / 2, nz / 2);
    let mut g_in = vec![0.0; channels * nx * ny * nz];
    for ch in 0..channels {
        for x in 0..hx {
            for y in 0..hy {
                for z in 0..hz {
                    let g = g_out[((ch * hx + x) * hy + y) * hz + z] / 8.0;
                    for dx in 0..2 {
                        for dy in 0..2 {
                            for dz in 0..2 {
                                g_in[((ch * nx + 2 * x + dx) * ny + 2 * y + dy) * nz
                                    + 2 * z
                                    + dz] = g;
                            }
                        }
                    }
                }
            }
        }
    }
    g_in
}

/// Nearest-neighbor 2x upsampling; `dims` are the small-side dimensions.
fn upsample2_forward(input: &[f64], channels: usize, dims: (usize, usize, usize)) -> Vec<f64> {
    let (nx, ny, nz) = dims;
    let (ux, uy, uz) = (2 * nx, 2 * ny, 2 * nz);
    let mut out = vec![0.0; channels * ux * uy * uz];
    for ch in 0..channels {
        for x in 0..ux {
            for y in 0..uy {
                for z in 0..uz {
                    out[((ch * ux + x) * uy + y) * uz + z] =
                        input[((ch * nx + x / 2) * ny + y / 2) * nz + z / 2];
                }
            }
        }
    }
    out
}

fn upsample2_backward(g_out: &[f64], channels: usize, dims: (usize, usize, usize)) -> Vec<f64> {
    let (nx, ny, nz) = dims;
    let (ux, uy, uz) = (2 * nx, 2 * ny, 2 * nz);
    let mut g_in = vec![0.0; channels * nx * ny * nz];
    for ch in 0..channels {
        for x in 0..ux {
            for y in 0..uy {
                for z in 0..uz {
                    g_in[((ch * nx + x / 2) * ny + y / 2) * nz + z / 2] +=
                        g_out[((ch * ux + x) * uy + y) * uz + z];
                }
            }
        }
    }
    g_in
}
