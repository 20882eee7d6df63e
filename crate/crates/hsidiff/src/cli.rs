//! Batch command surface: `synth`, `train`, `destripe`, `eval`,
//! `schedule-dump`. Every run writes a manifest with the full config
//! snapshot, seeds, paths and wall clock. Exit codes: 0 success, 1
//! runtime error, 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::datacube::{
    extract_patch, gaussian_bump_cube, load_envi, normalize, reassemble, sample_patches,
    save_envi, CubePatch, HyperCube, Interleave, PatchIndex,
};
use crate::denoiser::{Denoiser, DenoiserConfig, InflateMode, Kernel2D};
use crate::diffusion::{
    destripe_iterative, destripe_residual, make_schedule, NoiseSchedule, ScheduleKind,
    DEFAULT_BETA_END, DEFAULT_BETA_START,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, format_report, MetricConfig};
use crate::rng::Stream;
use crate::stripesynth::{self, StripeAxis, StripeConfig};
use crate::trainer::{
    dataset_lr_scale, load_bundle, run_pipeline, run_stage, save_bundle, CheckpointBundle,
    PatchSet, Stage1Init, StageConfig, StageId, TrainingLog,
};
use crate::util::{self, write_atomic};

#[derive(Parser, Debug)]
#[command(
    name = "hsidiff",
    version,
    about = "Hyperspectral destriping toolkit: synthetic stripes, 3D diffusion training, inference and metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a striped dataset (cube pair + patch pairs + manifests).
    Synth(SynthArgs),
    /// Train the denoiser (stages II and/or III).
    Train(TrainArgs),
    /// Destripe a cube patch-wise with a trained checkpoint.
    Destripe(DestripeArgs),
    /// Compute PSNR / SSIM / SAM between two cubes.
    Eval(EvalArgs),
    /// Dump a noise schedule as CSV.
    ScheduleDump(ScheduleArgs),
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    /// Input ENVI header. Omit to generate a procedural scene.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Procedural scene dimensions as LINESxSAMPLESxBANDS (e.g. 64x64x64).
    #[arg(long, conflicts_with = "input")]
    procedural: Option<String>,
    /// Seed for the procedural scene.
    #[arg(long, default_value_t = 0)]
    proc_seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Number of patch pairs to sample.
    #[arg(long, default_value_t = 64)]
    patches: usize,
    /// Patch edge length.
    #[arg(long, default_value_t = 32)]
    extent: usize,
    /// Master seed: stripes and patch sampling derive from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of columns striped per band, in (0, 1].
    #[arg(long, default_value_t = 0.15)]
    frequency: f64,
    /// Stripe field standard deviation (fraction of band dynamic range).
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    /// Treat sigma as an absolute value instead of a range fraction.
    #[arg(long, default_value_t = false)]
    sigma_absolute: bool,
    #[arg(long, default_value_t = 1)]
    fragments_min: usize,
    #[arg(long, default_value_t = 5)]
    fragments_max: usize,
    #[arg(long, default_value_t = 0.1)]
    min_fragment_len: f64,
    #[arg(long, default_value_t = 1.0)]
    max_fragment_len: f64,
    /// Axis stripes run along.
    #[arg(long, value_enum, default_value_t = AxisArg::Lines)]
    axis: AxisArg,
    /// Skip per-band normalization of the input cube.
    #[arg(long, default_value_t = false)]
    no_normalize: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum AxisArg {
    Lines,
    Samples,
}

impl From<AxisArg> for StripeAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Lines => StripeAxis::AlongLines,
            AxisArg::Samples => StripeAxis::AlongSamples,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Dataset index (from `synth`).
    #[arg(long)]
    data: PathBuf,
    /// Separate dataset for stage III (defaults to --data).
    #[arg(long)]
    data_iii: Option<PathBuf>,
    /// Stages to run: "II", "III" or "II,III".
    #[arg(long, default_value = "II,III")]
    stages: String,
    /// Resume/start from an existing checkpoint bundle.
    #[arg(long)]
    from: Option<PathBuf>,
    /// 2D weight container to inflate for stage I initialization.
    #[arg(long)]
    init_2d: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = InflateModeArg::Normalized)]
    inflate_mode: InflateModeArg,
    #[arg(long)]
    out: PathBuf,
    /// Steps per stage.
    #[arg(long, default_value_t = 30_000)]
    steps: usize,
    /// Override steps for stage III.
    #[arg(long)]
    steps_iii: Option<usize>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr0: f64,
    #[arg(long, default_value_t = 1000)]
    t_count: usize,
    /// Stage II noise bound (sigma ~ U(0, sigma_max)).
    #[arg(long, default_value_t = 15.0 / 255.0)]
    sigma_max: f64,
    /// Stage III spectral mixing mode.
    #[arg(long, value_enum, default_value_t = AugmentArg::Cutmix)]
    augment: AugmentArg,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    augment_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Toy preset: steps=300, batch=2, t_count=100 unless overridden.
    #[arg(long, default_value_t = false)]
    toy: bool,
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    #[arg(long, default_value_t = 2)]
    levels: usize,
    #[arg(long, default_value_t = 2)]
    convs_per_level: usize,
    #[arg(long, default_value_t = 16)]
    time_embed_dim: usize,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum InflateModeArg {
    Normalized,
    Literal,
}

impl From<InflateModeArg> for InflateMode {
    fn from(m: InflateModeArg) -> Self {
        match m {
            InflateModeArg::Normalized => InflateMode::Normalized,
            InflateModeArg::Literal => InflateMode::Literal,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum AugmentArg {
    None,
    Mixup,
    Cutmix,
}

#[derive(Args, Debug, Serialize)]
struct DestripeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Output ENVI header path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Residual)]
    mode: ModeArg,
    /// Probe step for residual mode (default: last schedule step).
    #[arg(long)]
    t_probe: Option<usize>,
    /// Noising level for iterative mode (default: t_count / 4).
    #[arg(long)]
    t0: Option<usize>,
    /// Patch tiling stride (default: extent / 2).
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated band indices to export as PGM images.
    #[arg(long)]
    bands: Option<String>,
    #[arg(long, default_value_t = false)]
    export_pgm: bool,
    /// Skip per-band normalization around inference.
    #[arg(long, default_value_t = false)]
    no_normalize: bool,
    /// Output interleave (default: same as input).
    #[arg(long)]
    interleave: Option<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Residual,
    Iterative,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Report JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Peak-to-peak range; "auto" uses 1.0 for unit-range references and
    /// max - min otherwise.
    #[arg(long, default_value = "auto")]
    data_range: String,
    #[arg(long, default_value_t = 7)]
    ssim_window: usize,
}

#[derive(Args, Debug, Serialize)]
struct ScheduleArgs {
    #[arg(long, default_value_t = 1000)]
    t_count: usize,
    #[arg(long, default_value_t = DEFAULT_BETA_START)]
    beta_start: f64,
    #[arg(long, default_value_t = DEFAULT_BETA_END)]
    beta_end: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Command failure, split by exit code.
#[derive(Debug)]
enum CmdError {
    /// Bad flags or flag combinations: exit 2.
    Usage(String),
    /// Anything that failed while executing: exit 1.
    Runtime(Error),
}

impl From<Error> for CmdError {
    fn from(e: Error) -> Self {
        CmdError::Runtime(e)
    }
}

impl From<serde_json::Error> for CmdError {
    fn from(e: serde_json::Error) -> Self {
        CmdError::Runtime(Error::Json(e))
    }
}

type CmdResult = std::result::Result<(), CmdError>;

fn usage(msg: impl Into<String>) -> CmdError {
    CmdError::Usage(msg.into())
}

/// Parse argv and run. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Destripe(args) => cmd_destripe(args),
        Command::Eval(args) => cmd_eval(args),
        Command::ScheduleDump(args) => cmd_schedule_dump(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(CmdError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            2
        }
        Err(CmdError::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Reproducibility record written next to every command's outputs.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    toolkit_version: String,
    config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    wall_clock_seconds: f64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    extra: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }
}

fn path_string(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Dataset layout produced by `synth` and consumed by `train`.
#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub version: u32,
    pub seed: u64,
    pub extent: usize,
    pub count: usize,
    pub clean_cube: String,
    pub striped_cube: String,
    pub pair_manifest: String,
    pub entries: Vec<DatasetEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: usize,
    pub clean: String,
    pub striped: String,
    pub line0: usize,
    pub sample0: usize,
    pub band0: usize,
}

fn parse_procedural(spec: &str) -> std::result::Result<(usize, usize, usize), CmdError> {
    let parts: Vec<&str> = spec.split('x').collect();
    if parts.len() != 3 {
        return Err(usage(format!(
            "--procedural expects LINESxSAMPLESxBANDS, got `{spec}`"
        )));
    }
    let mut dims = [0usize; 3];
    for (slot, part) in dims.iter_mut().zip(&parts) {
        *slot = part
            .parse()
            .map_err(|_| usage(format!("--procedural has a non-numeric dimension `{part}`")))?;
        if *slot == 0 {
            return Err(usage("--procedural dimensions must be >= 1"));
        }
    }
    Ok((dims[0], dims[1], dims[2]))
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    let started = Instant::now();
    if !(args.frequency > 0.0 && args.frequency <= 1.0) {
        return Err(usage(format!(
            "--frequency must be in (0, 1], got {}",
            args.frequency
        )));
    }
    if !(args.sigma > 0.0) {
        return Err(usage(format!("--sigma must be > 0, got {}", args.sigma)));
    }
    if args.fragments_min == 0 || args.fragments_min > args.fragments_max {
        return Err(usage("--fragments-min must satisfy 1 <= min <= max"));
    }
    if !(args.min_fragment_len > 0.0
        && args.min_fragment_len <= args.max_fragment_len
        && args.max_fragment_len <= 1.0)
    {
        return Err(usage(
            "--min-fragment-len/--max-fragment-len must satisfy 0 < min <= max <= 1",
        ));
    }
    if args.patches == 0 {
        return Err(usage("--patches must be >= 1"));
    }

    let source = match (&args.input, &args.procedural) {
        (Some(path), None) => load_envi(path).map_err(CmdError::Runtime)?,
        (None, Some(spec)) => {
            let (lines, samples, bands) = parse_procedural(spec)?;
            gaussian_bump_cube(lines, samples, bands, args.proc_seed)
        }
        (None, None) => {
            return Err(usage("give either --in or --procedural"));
        }
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    if args.extent == 0
        || args.extent > source.lines
        || args.extent > source.samples
        || args.extent > source.bands
    {
        return Err(usage(format!(
            "--extent {} does not fit the cube {:?}",
            args.extent,
            source.shape()
        )));
    }

    let clean = if args.no_normalize {
        source
    } else {
        normalize(&source).0
    };
    let stripe_cfg = StripeConfig {
        sigma: args.sigma,
        sigma_absolute: args.sigma_absolute,
        stripe_frequency: args.frequency,
        fragments_min: args.fragments_min,
        fragments_max: args.fragments_max,
        min_fragment_len: args.min_fragment_len,
        max_fragment_len: args.max_fragment_len,
        axis: args.axis.into(),
        seed: args.seed,
    };
    let (striped, realization) = stripesynth::synth_stripes(&clean, &stripe_cfg)?;

    let out = &args.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let clean_hdr = out.join("clean.hdr");
    let striped_hdr = out.join("striped.hdr");
    save_envi(&clean, &clean_hdr, clean.interleave)?;
    save_envi(&striped, &striped_hdr, striped.interleave)?;
    // Manifest paths are relative to the dataset directory so reruns into
    // different directories stay bit-identical and datasets relocatable.
    let manifest_path = out.join("pair_manifest.json");
    stripesynth::emit_pair_manifest(
        Path::new("clean.hdr"),
        Path::new("striped.hdr"),
        &realization,
        &manifest_path,
    )?;

    // Patch pairs: identical indices cut from both cubes.
    let patch_dir = out.join("patches");
    std::fs::create_dir_all(&patch_dir).map_err(|e| Error::io(&patch_dir, e))?;
    let clean_patches = sample_patches(&clean, args.patches, args.extent, args.seed)?;
    let mut entries = Vec::with_capacity(clean_patches.len());
    for (id, patch) in clean_patches.iter().enumerate() {
        let striped_patch = extract_patch(&striped, patch.index)?;
        let clean_rel = format!("patches/clean_{id:04}.hdr");
        let striped_rel = format!("patches/striped_{id:04}.hdr");
        save_envi(
            &patch_to_cube(patch)?,
            &out.join(&clean_rel),
            Interleave::Bsq,
        )?;
        save_envi(
            &patch_to_cube(&striped_patch)?,
            &out.join(&striped_rel),
            Interleave::Bsq,
        )?;
        entries.push(DatasetEntry {
            id,
            clean: clean_rel,
            striped: striped_rel,
            line0: patch.index.line0,
            sample0: patch.index.sample0,
            band0: patch.index.band0,
        });
    }
    let index = DatasetIndex {
        version: 1,
        seed: args.seed,
        extent: args.extent,
        count: entries.len(),
        clean_cube: "clean.hdr".into(),
        striped_cube: "striped.hdr".into(),
        pair_manifest: "pair_manifest.json".into(),
        entries,
    };
    write_atomic(&out.join("index.json"), &serde_json::to_vec_pretty(&index)?)
        .map_err(CmdError::Runtime)?;

    let manifest = RunManifest {
        command: "synth".into(),
        toolkit_version: env!("CARGO_PKG_VERSION").into(),
        config: serde_json::to_value(&args).map_err(Error::from)?,
        seeds: BTreeMap::from([("seed".into(), args.seed), ("proc_seed".into(), args.proc_seed)]),
        inputs: args.input.iter().map(|p| path_string(p)).collect(),
        outputs: vec![path_string(out)],
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        extra: BTreeMap::new(),
    };
    manifest.write(&out.join("run-manifest.json"))?;
    println!(
        "synth: wrote {} patch pairs to {}",
        index.count,
        out.display()
    );
    Ok(())
}

/// A patch is stored as a tiny extent-cubed ENVI cube.
fn patch_to_cube(patch: &CubePatch) -> Result<HyperCube> {
    let e = patch.extent();
    HyperCube::new(e, e, e, patch.values.clone(), None, Interleave::Bsq)
}

fn cube_to_patch(cube: &HyperCube, entry: &DatasetEntry, extent: usize) -> Result<CubePatch> {
    if cube.shape() != (extent, extent, extent) {
        return Err(Error::Dimension(format!(
            "patch file has shape {:?}, expected {extent}^3",
            cube.shape()
        )));
    }
    CubePatch::new(
        PatchIndex {
            line0: entry.line0,
            sample0: entry.sample0,
            band0: entry.band0,
            extent,
        },
        cube.values().to_vec(),
        cube.id.clone(),
    )
}

fn load_dataset(index_path: &Path) -> Result<(DatasetIndex, PatchSet)> {
    let text = std::fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text)?;
    let base = index_path.parent().unwrap_or_else(|| Path::new("."));
    let mut clean = Vec::with_capacity(index.entries.len());
    let mut striped = Vec::with_capacity(index.entries.len());
    for entry in &index.entries {
        let c = load_envi(&base.join(&entry.clean))?;
        let s = load_envi(&base.join(&entry.striped))?;
        clean.push(cube_to_patch(&c, entry, index.extent)?);
        striped.push(cube_to_patch(&s, entry, index.extent)?);
    }
    let set = PatchSet::pairs(clean, striped)?;
    Ok((index, set))
}

fn parse_stages(spec: &str) -> std::result::Result<Vec<StageId>, CmdError> {
    let mut stages = Vec::new();
    for token in spec.split(',') {
        match token.trim() {
            "II" | "2" => stages.push(StageId::II),
            "III" | "3" => stages.push(StageId::III),
            other => {
                return Err(usage(format!(
                    "--stages accepts II and III, got `{other}`"
                )))
            }
        }
    }
    if stages.is_empty() {
        return Err(usage("--stages must name at least one stage"));
    }
    if stages == [StageId::III, StageId::II] {
        return Err(usage("--stages II must come before III"));
    }
    Ok(stages)
}

/// Read a 2D kernel set from a tensor container: tensors named
/// `<layer>.weight` with shape [k, k, c_in, c_out] plus `<layer>.bias`.
fn load_2d_sources(path: &Path) -> Result<Vec<(String, Kernel2D)>> {
    let tensors = crate::denoiser::load_tensors(path)?;
    let mut sources = Vec::new();
    for t in &tensors {
        let Some(layer) = t.name.strip_suffix(".weight") else {
            continue;
        };
        if t.shape.len() != 4 {
            return Err(Error::Checkpoint(format!(
                "2D weight `{}` must be 4D [m, n, c_in, c_out], got {:?}",
                t.name, t.shape
            )));
        }
        let bias = tensors
            .iter()
            .find(|b| b.name == format!("{layer}.bias"))
            .ok_or_else(|| Error::Checkpoint(format!("missing `{layer}.bias`")))?;
        sources.push((
            layer.to_string(),
            Kernel2D::new(
                t.shape[0],
                t.shape[1],
                t.shape[2],
                t.shape[3],
                t.data.clone(),
                bias.data.clone(),
            )?,
        ));
    }
    if sources.is_empty() {
        return Err(Error::Checkpoint(format!(
            "no `<layer>.weight` tensors in {}",
            path.display()
        )));
    }
    Ok(sources)
}

fn write_stage_outputs(out: &Path, log: &TrainingLog) -> Result<()> {
    let csv_path = out.join(format!("train_stage_{}.csv", log.stage.as_str()));
    write_atomic(&csv_path, log.to_csv().as_bytes())?;
    if !log.aug_events.is_empty() {
        let mut lines = String::new();
        for event in &log.aug_events {
            lines.push_str(&serde_json::to_string(event)?);
            lines.push('\n');
        }
        write_atomic(
            &out.join(format!("aug_stage_{}.jsonl", log.stage.as_str())),
            lines.as_bytes(),
        )?;
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let started = Instant::now();
    let stages = parse_stages(&args.stages)?;
    if args.batch_size == 0 {
        return Err(usage("--batch-size must be >= 1"));
    }
    if !(args.lr0 > 0.0) {
        return Err(usage(format!("--lr0 must be > 0, got {}", args.lr0)));
    }
    if !(0.0..=1.0).contains(&args.augment_prob) {
        return Err(usage("--augment-prob must be in [0, 1]"));
    }
    if args.augment as u8 != AugmentArg::None as u8 && !(args.alpha > 0.0) {
        return Err(usage(format!("--alpha must be > 0, got {}", args.alpha)));
    }

    let (steps, batch_size, t_count) = if args.toy {
        (args.steps.min(300), args.batch_size.min(2), args.t_count.min(100))
    } else {
        (args.steps, args.batch_size, args.t_count)
    };

    let (index, data) = load_dataset(&args.data)?;
    let data3 = match &args.data_iii {
        Some(path) => Some(load_dataset(path)?),
        None => None,
    };

    let out = &args.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;

    let net_config = DenoiserConfig {
        extent: index.extent,
        base_channels: args.base_channels,
        levels: args.levels,
        convs_per_level: args.convs_per_level,
        time_embed_dim: args.time_embed_dim,
        t_count,
        kernel: args.kernel,
        seed: args.seed,
    };
    net_config.validate().map_err(|e| usage(e.to_string()))?;

    let make_stage_cfg = |stage: StageId, seed_offset: u64| {
        let mut cfg = StageConfig::new(stage, args.seed.wrapping_add(seed_offset));
        cfg.steps = if stage == StageId::III {
            args.steps_iii.unwrap_or(steps).min(if args.toy { 300 } else { usize::MAX })
        } else {
            steps
        };
        cfg.batch_size = batch_size;
        cfg.lr0 = args.lr0;
        cfg.sigma_max = args.sigma_max;
        cfg.data = path_string(&args.data);
        if stage == StageId::III {
            cfg.augment = match args.augment {
                AugmentArg::None => None,
                AugmentArg::Mixup => Some(crate::augment::MixConfig::mixup(cfg.seed)),
                AugmentArg::Cutmix => {
                    Some(crate::augment::MixConfig::cutmix(args.alpha, cfg.seed))
                }
            };
            cfg.augment_prob = args.augment_prob;
        }
        cfg
    };

    let sources_2d = match &args.init_2d {
        Some(path) => Some(load_2d_sources(path)?),
        None => None,
    };

    let mut outputs: Vec<String> = Vec::new();
    let final_bundle: Option<CheckpointBundle>;
    let mut logs: Vec<TrainingLog> = Vec::new();

    match stages.as_slice() {
        [StageId::II] => {
            let net = match &args.from {
                Some(path) => load_bundle(path)?.net,
                None => match &sources_2d {
                    Some(sources) => {
                        Denoiser::init_from_2d(net_config, sources, args.inflate_mode.into())?
                    }
                    None => Denoiser::init_random(net_config)?,
                },
            };
            let cfg2 = make_stage_cfg(StageId::II, 2);
            let total = cfg2.steps;
            let mut cb = |step: usize, net: &Denoiser| {
                let path = ckpt_dir.join(format!("stage_II_step{step:06}.hsid"));
                save_bundle(
                    &path,
                    &CheckpointBundle {
                        stage: StageId::II,
                        step,
                        net: net.clone(),
                    },
                )
            };
            let (net, log) = run_stage(&cfg2, net, &data, Some(&mut cb))?;
            write_stage_outputs(out, &log)?;
            logs.push(log);
            final_bundle = Some(CheckpointBundle {
                stage: StageId::II,
                step: total,
                net,
            });
        }
        [StageId::III] => {
            let from = args.from.as_ref().ok_or_else(|| {
                usage("--stages III needs a Stage II checkpoint via --from")
            })?;
            let bundle = load_bundle(from)?;
            if bundle.stage == StageId::I {
                return Err(usage(
                    "--from bundle is a stage I initialization; train stage II first",
                ));
            }
            let data3_set = data3.as_ref().map(|(_, s)| s).unwrap_or(&data);
            let mut cfg3 = make_stage_cfg(StageId::III, 3);
            // --data is the stage II set; scale by relative size.
            cfg3.lr_scale = dataset_lr_scale(data3_set.len(), data.len());
            let total = cfg3.steps;
            let mut cb = |step: usize, net: &Denoiser| {
                let path = ckpt_dir.join(format!("stage_III_step{step:06}.hsid"));
                save_bundle(
                    &path,
                    &CheckpointBundle {
                        stage: StageId::III,
                        step,
                        net: net.clone(),
                    },
                )
            };
            let (net, log) = run_stage(&cfg3, bundle.net, data3_set, Some(&mut cb))?;
            write_stage_outputs(out, &log)?;
            logs.push(log);
            final_bundle = Some(CheckpointBundle {
                stage: StageId::III,
                step: total,
                net,
            });
        }
        [StageId::II, StageId::III] => {
            let stage1 = match &sources_2d {
                Some(sources) => Stage1Init::From2d {
                    config: net_config,
                    sources,
                    mode: args.inflate_mode.into(),
                },
                None => Stage1Init::Random(net_config),
            };
            let cfg2 = make_stage_cfg(StageId::II, 2);
            let cfg3 = make_stage_cfg(StageId::III, 3);
            let steps2 = cfg2.steps;
            let steps3 = cfg3.steps;
            let data3_set = data3.as_ref().map(|(_, s)| s).unwrap_or(&data);
            let stage2_path = out.join("stage_II.hsid");
            let mut cb = |stage: StageId, step: usize, net: &Denoiser| {
                let path = ckpt_dir.join(format!(
                    "stage_{}_step{step:06}.hsid",
                    stage.as_str()
                ));
                save_bundle(
                    &path,
                    &CheckpointBundle {
                        stage,
                        step,
                        net: net.clone(),
                    },
                )?;
                if stage == StageId::II && step == steps2 {
                    save_bundle(
                        &stage2_path,
                        &CheckpointBundle {
                            stage,
                            step,
                            net: net.clone(),
                        },
                    )?;
                }
                Ok(())
            };
            let (net, pipeline_logs) =
                run_pipeline(stage1, cfg2, cfg3, &data, data3_set, Some(&mut cb))?;
            for log in &pipeline_logs {
                write_stage_outputs(out, log)?;
            }
            logs.extend(pipeline_logs);
            if stage2_path.exists() {
                outputs.push(path_string(&stage2_path));
            }
            final_bundle = Some(CheckpointBundle {
                stage: StageId::III,
                step: steps3,
                net,
            });
        }
        other => {
            return Err(usage(format!(
                "unsupported stage combination {:?}",
                other.iter().map(StageId::as_str).collect::<Vec<_>>()
            )));
        }
    }

    let bundle = final_bundle.expect("every branch sets the final bundle");
    let model_path = out.join(format!("stage_{}.hsid", bundle.stage.as_str()));
    save_bundle(&model_path, &bundle)?;
    outputs.push(path_string(&model_path));

    let manifest = RunManifest {
        command: "train".into(),
        toolkit_version: env!("CARGO_PKG_VERSION").into(),
        config: serde_json::to_value(&args).map_err(Error::from)?,
        seeds: BTreeMap::from([("seed".into(), args.seed)]),
        inputs: vec![path_string(&args.data)],
        outputs,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        extra: BTreeMap::from([(
            "final_losses".into(),
            serde_json::to_value(
                logs.iter()
                    .map(|l| l.records.last().map(|r| r.loss))
                    .collect::<Vec<_>>(),
            )
            .map_err(Error::from)?,
        )]),
    };
    manifest.write(&out.join("run-manifest.json"))?;
    println!("train: wrote {}", model_path.display());
    Ok(())
}

/// Tile starts covering [0, dim - extent] with the given stride, always
/// including the final flush position.
fn tile_starts(dim: usize, extent: usize, stride: usize) -> Vec<usize> {
    let last = dim - extent;
    let mut starts: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    starts
}

fn parse_band_list(spec: &str, bands: usize) -> std::result::Result<Vec<usize>, CmdError> {
    let mut out = Vec::new();
    for token in spec.split(',') {
        let band: usize = token
            .trim()
            .parse()
            .map_err(|_| usage(format!("--bands has a non-numeric entry `{token}`")))?;
        if band >= bands {
            return Err(usage(format!(
                "--bands entry {band} out of range (cube has {bands} bands)"
            )));
        }
        out.push(band);
    }
    Ok(out)
}

/// 8-bit PGM (P5) export of one band plane, scaled by its own min/max.
fn write_pgm(plane: &[f32], lines: usize, samples: usize, path: &Path) -> Result<(f64, f64)> {
    let lo = plane.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
    let hi = plane.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{samples} {lines}\n255\n").into_bytes();
    bytes.reserve(plane.len());
    for &v in plane {
        let scaled = ((v as f64 - lo) / span * 255.0).round().clamp(0.0, 255.0);
        bytes.push(scaled as u8);
    }
    write_atomic(path, &bytes)?;
    Ok((lo, hi))
}

fn cmd_destripe(args: DestripeArgs) -> CmdResult {
    let started = Instant::now();
    let bundle = load_bundle(&args.checkpoint)?;
    let net = bundle.net;
    let extent = net.config.extent;
    let t_count = net.config.t_count;
    let schedule = make_schedule(t_count, DEFAULT_BETA_START, DEFAULT_BETA_END, ScheduleKind::Linear)?;

    let t_probe = args.t_probe.unwrap_or(t_count - 1);
    let t0 = args.t0.unwrap_or(t_count / 4);
    if t_probe >= t_count {
        return Err(usage(format!(
            "--t-probe {t_probe} out of range (t_count = {t_count})"
        )));
    }
    if t0 >= t_count {
        return Err(usage(format!("--t0 {t0} out of range (t_count = {t_count})")));
    }
    let stride = args.stride.unwrap_or_else(|| (extent / 2).max(1));
    if stride == 0 {
        return Err(usage("--stride must be >= 1"));
    }

    let input_cube = load_envi(&args.input)?;
    if extent > input_cube.lines || extent > input_cube.samples || extent > input_cube.bands {
        return Err(CmdError::Runtime(Error::Dimension(format!(
            "network extent {extent} exceeds cube {:?}",
            input_cube.shape()
        ))));
    }
    let (work_cube, norm_record) = if args.no_normalize {
        (input_cube.clone(), None)
    } else {
        let (c, r) = normalize(&input_cube);
        (c, Some(r))
    };

    let mut indices = Vec::new();
    for &l0 in &tile_starts(work_cube.lines, extent, stride) {
        for &s0 in &tile_starts(work_cube.samples, extent, stride) {
            for &b0 in &tile_starts(work_cube.bands, extent, stride) {
                indices.push(PatchIndex {
                    line0: l0,
                    sample0: s0,
                    band0: b0,
                    extent,
                });
            }
        }
    }

    let root = Stream::new(args.seed);
    let workers = util::worker_count().max(1);
    let mode = args.mode;
    let results: Vec<(PatchIndex, Vec<f32>)> = {
        let mut out: Vec<Option<(PatchIndex, Vec<f32>)>> = vec![None; indices.len()];
        let chunk = indices.len().div_ceil(workers);
        std::thread::scope(|scope| -> Result<()> {
            let mut handles = Vec::new();
            for (ci, (idx_chunk, out_chunk)) in indices
                .chunks(chunk)
                .zip(out.chunks_mut(chunk))
                .enumerate()
            {
                let net = &net;
                let schedule = &schedule;
                let work_cube = &work_cube;
                let root = root.clone();
                handles.push(scope.spawn(move || -> Result<()> {
                    for (k, (index, slot)) in
                        idx_chunk.iter().zip(out_chunk.iter_mut()).enumerate()
                    {
                        let ordinal = (ci * chunk + k) as u64;
                        let patch = extract_patch(work_cube, *index)?;
                        let result = match mode {
                            ModeArg::Residual => {
                                destripe_residual(net, &patch, t_probe, schedule)?
                            }
                            ModeArg::Iterative => {
                                let mut stream = root.fork(ordinal);
                                destripe_iterative(net, &patch, t0, schedule, &mut stream)?
                            }
                        };
                        *slot = Some((*index, result.values));
                    }
                    Ok(())
                }));
            }
            for h in handles {
                h.join().expect("worker panicked")?;
            }
            Ok(())
        })?;
        out.into_iter().map(|o| o.expect("all slots filled")).collect()
    };

    let mut restored = reassemble(
        &results,
        work_cube.lines,
        work_cube.samples,
        work_cube.bands,
    )?;
    restored.wavelengths = input_cube.wavelengths.clone();
    let output_cube = match &norm_record {
        Some(record) => record.denormalize(&restored)?,
        None => restored,
    };
    let out_interleave = match &args.interleave {
        Some(s) => Interleave::parse(s)
            .ok_or_else(|| usage(format!("--interleave must be bsq/bil/bip, got `{s}`")))?,
        None => input_cube.interleave,
    };
    save_envi(&output_cube, &args.out, out_interleave)?;

    let mut outputs = vec![path_string(&args.out)];
    let mut extra: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    if let Some(bands_spec) = &args.bands {
        let bands = parse_band_list(bands_spec, input_cube.bands)?;
        if args.export_pgm {
            let dir = args
                .out
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            let mut scale_log = BTreeMap::new();
            for band in bands {
                let in_plane = input_cube.band_plane(band)?;
                let out_plane = output_cube.band_plane(band)?;
                let in_path = dir.join(format!("in_band{band:03}.pgm"));
                let out_path = dir.join(format!("out_band{band:03}.pgm"));
                let in_range =
                    write_pgm(&in_plane, input_cube.lines, input_cube.samples, &in_path)?;
                let out_range =
                    write_pgm(&out_plane, output_cube.lines, output_cube.samples, &out_path)?;
                scale_log.insert(
                    format!("band{band:03}"),
                    serde_json::json!({
                        "input_min_max": [in_range.0, in_range.1],
                        "output_min_max": [out_range.0, out_range.1],
                    }),
                );
                outputs.push(path_string(&in_path));
                outputs.push(path_string(&out_path));
            }
            extra.insert(
                "pgm_scaling".into(),
                serde_json::to_value(scale_log).map_err(Error::from)?,
            );
        }
    }

    let manifest = RunManifest {
        command: "destripe".into(),
        toolkit_version: env!("CARGO_PKG_VERSION").into(),
        config: serde_json::to_value(&args).map_err(Error::from)?,
        seeds: BTreeMap::from([("seed".into(), args.seed)]),
        inputs: vec![path_string(&args.checkpoint), path_string(&args.input)],
        outputs,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        extra,
    };
    let manifest_path = args.out.with_extension("manifest.json");
    manifest.write(&manifest_path)?;
    println!(
        "destripe: {} patches -> {}",
        indices.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let started = Instant::now();
    let reference = load_envi(&args.reference)?;
    let test = load_envi(&args.test)?;
    let data_range = match args.data_range.as_str() {
        "auto" => {
            let lo = reference.values().iter().cloned().fold(f32::INFINITY, f32::min) as f64;
            let hi = reference
                .values()
                .iter()
                .cloned()
                .fold(f32::NEG_INFINITY, f32::max) as f64;
            if lo >= -1e-6 && hi <= 1.0 + 1e-6 {
                1.0
            } else {
                hi - lo
            }
        }
        other => {
            let v: f64 = other
                .parse()
                .map_err(|_| usage(format!("--data-range must be `auto` or a number, got `{other}`")))?;
            if !(v > 0.0) {
                return Err(usage("--data-range must be > 0"));
            }
            v
        }
    };
    if args.ssim_window == 0 {
        return Err(usage("--ssim-window must be >= 1"));
    }
    let cfg = MetricConfig {
        data_range,
        ssim_window: args.ssim_window,
    };
    let report = evaluate(&reference, &test, &cfg)?;
    write_atomic(&args.out, &serde_json::to_vec_pretty(&report)?)
        .map_err(CmdError::Runtime)?;
    print!("{}", format_report(&report));

    let manifest = RunManifest {
        command: "eval".into(),
        toolkit_version: env!("CARGO_PKG_VERSION").into(),
        config: serde_json::to_value(&args).map_err(Error::from)?,
        seeds: BTreeMap::new(),
        inputs: vec![path_string(&args.reference), path_string(&args.test)],
        outputs: vec![path_string(&args.out)],
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        extra: BTreeMap::new(),
    };
    manifest.write(&args.out.with_extension("manifest.json"))?;
    Ok(())
}

fn cmd_schedule_dump(args: ScheduleArgs) -> CmdResult {
    let started = Instant::now();
    let schedule: NoiseSchedule =
        make_schedule(args.t_count, args.beta_start, args.beta_end, ScheduleKind::Linear)
            .map_err(|e| usage(e.to_string()))?;
    schedule.write_csv(&args.out)?;
    let manifest = RunManifest {
        command: "schedule-dump".into(),
        toolkit_version: env!("CARGO_PKG_VERSION").into(),
        config: serde_json::to_value(&args).map_err(Error::from)?,
        seeds: BTreeMap::new(),
        inputs: Vec::new(),
        outputs: vec![path_string(&args.out)],
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        extra: BTreeMap::new(),
    };
    manifest.write(&args.out.with_extension("manifest.json"))?;
    println!("schedule-dump: wrote {}", args.out.display());
    Ok(())
}
