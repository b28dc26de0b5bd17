//! The `poseinit` command line.
//!
//! Every subcommand reads an optional JSON config (`--config`), applies its
//! flags on top (flags win), and writes artifacts under `--out-dir`. Every
//! artifact embeds the resolved settings, seed included.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cascade::{train_cascade, CascadeConfig, CascadeModel, CascadeSample};
use crate::data::{
    csv_writer, generate_synthetic, load_dataset, save_dataset, split, write_pose_csv, write_pts,
    PoseDistribution, Sample, SkippedSample, SynthConfig,
};
use crate::error::{Error, ErrorClass};
use crate::eval::{
    compare_schemes, write_comparison, EvalSample, Pipeline, PoseSource, SchemeSpec,
    DEFAULT_FAILURE_THRESHOLD,
};
use crate::geometry::{BoundingBox, HeadPose, Shape3D};
use crate::gray::GrayImage;
use crate::init::{InitScheme, TrainExemplar};
use crate::pose_net::{train, PoseSample, TrainConfig};
use crate::pose_net::PoseNet;
use crate::pose_solver::fit_pose_from_landmarks;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const POSE_NET_FILE: &str = "pose_net.bin";
pub const CASCADE_FILE: &str = "cascade.bin";
pub const EXEMPLARS_FILE: &str = "exemplars.json";

#[derive(Debug, Parser)]
#[command(name = "poseinit", version, about = "Head-pose-driven initialization for cascaded face alignment")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Seed for every random choice the subcommand makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON settings file. Flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing [default: out]
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a seeded synthetic dataset, split into train/ and test/.
    SynthGen(SynthGenArgs),
    /// Fit head poses to landmarks and write an annotated manifest.
    AnnotatePose(AnnotateArgs),
    /// Train the pose network; writes the model and its learning curve.
    TrainPose(TrainPoseArgs),
    /// Train the fern cascade; writes the model, stage trace and exemplars.
    TrainCascade(TrainCascadeArgs),
    /// Estimate pose, initialize and run the cascade; writes pts files.
    Align(AlignArgs),
    /// Evaluate one initialization scheme on a labelled manifest.
    Evaluate(EvaluateArgs),
    /// Evaluate several schemes on the same samples and seeds.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DistributionArg {
    Uniform,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseSourceArg {
    Net,
    Solver,
}

impl From<PoseSourceArg> for PoseSource {
    fn from(p: PoseSourceArg) -> PoseSource {
        match p {
            PoseSourceArg::Net => PoseSource::Net,
            PoseSourceArg::Solver => PoseSource::Solver,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthGenArgs {
    #[arg(long)]
    pub count: Option<usize>,
    /// Degrees, as `lo,hi`.
    #[arg(long, value_parser = parse_floats::<2>, allow_hyphen_values = true)]
    pub pitch_range: Option<[f64; 2]>,
    #[arg(long, value_parser = parse_floats::<2>, allow_hyphen_values = true)]
    pub yaw_range: Option<[f64; 2]>,
    #[arg(long, value_parser = parse_floats::<2>, allow_hyphen_values = true)]
    pub roll_range: Option<[f64; 2]>,
    #[arg(long, value_enum)]
    pub distribution: Option<DistributionArg>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Fraction of samples held out in test/ [default: 0.2]
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct AnnotateArgs {
    /// Manifest to annotate. It is not modified.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// 3D reference shape (`x y z` per line) [default: built-in 68-point face]
    #[arg(long)]
    pub shape3d: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainPoseArgs {
    /// Training manifest. Samples without poses are annotated on the fly.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub jitter_copies: Option<usize>,
    #[arg(long)]
    pub jitter_fraction: Option<f64>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    #[arg(long)]
    pub shape3d: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainCascadeArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long)]
    pub ferns_per_stage: Option<usize>,
    #[arg(long)]
    pub fern_depth: Option<usize>,
    #[arg(long)]
    pub feature_pool: Option<usize>,
    #[arg(long)]
    pub shrinkage: Option<f64>,
    #[arg(long)]
    pub augmentation: Option<usize>,
    /// Largest probe offset, in box widths.
    #[arg(long)]
    pub max_offset: Option<f64>,
    #[arg(long)]
    pub shape3d: Option<PathBuf>,
}

/// Model inputs shared by align, evaluate and compare.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub cascade: Option<PathBuf>,
    /// Training exemplars [default: exemplars.json next to the cascade]
    #[arg(long)]
    pub exemplars: Option<PathBuf>,
    #[arg(long)]
    pub pose_net: Option<PathBuf>,
    /// Pose for the 3d and knn schemes [default: net when --pose-net is given, else solver]
    #[arg(long, value_enum)]
    pub pose_source: Option<PoseSourceArg>,
    #[arg(long)]
    pub shape3d: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AlignArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// mean | random:<n> | 3d | knn:<k>
    #[arg(long)]
    pub scheme: Option<String>,
    /// Align every sample of a manifest.
    #[arg(long, conflicts_with = "image")]
    pub manifest: Option<PathBuf>,
    /// Align a single image; needs --bbox.
    #[arg(long, requires = "bbox")]
    pub image: Option<PathBuf>,
    /// Face box as `x,y,w,h`.
    #[arg(long, value_parser = parse_floats::<4>, allow_hyphen_values = true)]
    pub bbox: Option<[f64; 4]>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Failure threshold on the normalized error [default: 0.1]
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated schemes; the first is the baseline of the paired deltas.
    #[arg(long, value_delimiter = ',')]
    pub schemes: Option<Vec<String>>,
    /// Seeds for the random schemes [default: 0,1,2,3,4]
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

// ---------------------------------------------------------------- errors

/// A failure with its exit status.
#[derive(Debug)]
pub struct CliError {
    pub class: ErrorClass,
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> CliError {
        CliError {
            class: ErrorClass::Usage,
            kind: "usage".into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class {
            ErrorClass::Usage => EXIT_USAGE,
            ErrorClass::Data => EXIT_DATA,
            ErrorClass::Numeric => EXIT_NUMERIC,
        }
    }

    /// One JSON object on one line.
    pub fn line(&self) -> String {
        json!({ "error": self.kind, "exit": self.exit_code(), "message": self.message }).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        CliError {
            class: e.class(),
            kind: e.kind().into(),
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Settings that fail validation are usage errors, not data errors.
fn usage_on_err<T>(r: crate::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::usage(e.to_string()))
}

// ---------------------------------------------------------------- settings

/// Common values resolved from flags, then config, then defaults.
struct Ctx {
    seed: u64,
    out_dir: PathBuf,
    file: Value,
}

impl Ctx {
    fn new(common: &CommonArgs) -> CliResult<Ctx> {
        let file = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
                if !v.is_object() {
                    return Err(CliError::usage("config must be a JSON object"));
                }
                v
            }
            None => json!({}),
        };
        let seed = match common.seed {
            Some(s) => s,
            None => match file.get("seed") {
                Some(v) => v.as_u64().ok_or_else(|| CliError::usage("config seed must be a non-negative integer"))?,
                None => 0,
            },
        };
        let out_dir = match &common.out_dir {
            Some(p) => p.clone(),
            None => match file.get("out_dir") {
                Some(Value::String(s)) => PathBuf::from(s),
                Some(_) => return Err(CliError::usage("config out_dir must be a string")),
                None => PathBuf::from("out"),
            },
        };
        Ok(Ctx { seed, out_dir, file })
    }

    /// Settings of type `T` read from the config file (missing fields default).
    fn settings<T: DeserializeOwned>(&self) -> CliResult<T> {
        serde_json::from_value(self.file.clone()).map_err(|e| CliError::usage(format!("config: {e}")))
    }

    fn out(&self) -> CliResult<&Path> {
        fs::create_dir_all(&self.out_dir).map_err(|e| CliError::from(Error::io(&self.out_dir, e)))?;
        Ok(&self.out_dir)
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn set_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

/// `N` comma-separated numbers.
fn parse_floats<const N: usize>(s: &str) -> std::result::Result<[f64; N], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected {N} comma-separated numbers, got {}", v.len()))
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::usage(format!("missing --{flag}")))
}

fn load_shape3d(path: &Option<PathBuf>) -> CliResult<Shape3D> {
    Ok(match path {
        Some(p) => Shape3D::load(p)?,
        None => Shape3D::canonical(),
    })
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

/// Fills missing poses from landmarks. Samples that cannot be annotated are
/// dropped and reported.
fn ensure_poses(samples: Vec<Sample>, shape3d: &Shape3D) -> (Vec<Sample>, Vec<SkippedSample>) {
    let mut kept = Vec::with_capacity(samples.len());
    let mut skipped = Vec::new();
    for mut s in samples {
        if s.pose.is_none() {
            match &s.landmarks {
                Some(l) => match fit_pose_from_landmarks(l, shape3d) {
                    Ok(fit) => s.pose = Some(fit.pose),
                    Err(e) => {
                        skipped.push(SkippedSample { id: s.id.clone(), reason: e.to_string() });
                        continue;
                    }
                },
                None => {
                    skipped.push(SkippedSample { id: s.id.clone(), reason: "no landmarks".into() });
                    continue;
                }
            }
        }
        kept.push(s);
    }
    (kept, skipped)
}

// ---------------------------------------------------------------- synth-gen

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthGenSettings {
    #[serde(flatten)]
    pub synth: SynthConfig,
    pub test_fraction: f64,
}

impl Default for SynthGenSettings {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            test_fraction: 0.2,
        }
    }
}

fn synth_gen(ctx: &Ctx, a: &SynthGenArgs) -> CliResult<()> {
    let mut s: SynthGenSettings = ctx.settings()?;
    set(&mut s.synth.count, a.count);
    set(&mut s.synth.pitch_range, a.pitch_range);
    set(&mut s.synth.yaw_range, a.yaw_range);
    set(&mut s.synth.roll_range, a.roll_range);
    set(
        &mut s.synth.distribution,
        a.distribution.map(|d| match d {
            DistributionArg::Uniform => PoseDistribution::Uniform,
            DistributionArg::Gaussian => PoseDistribution::Gaussian,
        }),
    );
    set(&mut s.synth.image_size, a.image_size);
    set(&mut s.synth.noise_sigma, a.noise_sigma);
    set(&mut s.test_fraction, a.test_fraction);
    s.synth.seed = ctx.seed;
    usage_on_err(s.synth.validate())?;
    if !(0.0..=1.0).contains(&s.test_fraction) {
        return Err(CliError::usage("test fraction must lie in [0, 1]"));
    }

    let config = json!({ "subcommand": "synth-gen", "seed": ctx.seed, "settings": s });
    let samples = generate_synthetic(&s.synth, &Shape3D::canonical())?;
    let (train_set, test_set) = split(samples, 1.0 - s.test_fraction, ctx.seed)?;
    let out = ctx.out()?;
    for (name, set) in [("train", &train_set), ("test", &test_set)] {
        let path = save_dataset(out.join(name), set, &config)?;
        info!("wrote {} samples to {}", set.len(), path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------- annotate-pose

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotateSettings {
    pub manifest: Option<PathBuf>,
    pub shape3d: Option<PathBuf>,
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    fs::canonicalize(p).map_err(|e| Error::io(p, e).into())
}

fn annotate_pose(ctx: &Ctx, a: &AnnotateArgs) -> CliResult<()> {
    let mut s: AnnotateSettings = ctx.settings()?;
    set_path(&mut s.manifest, &a.manifest);
    set_path(&mut s.shape3d, &a.shape3d);
    let manifest_path = required(&s.manifest, "manifest")?;
    let shape3d = load_shape3d(&s.shape3d)?;
    let config = json!({ "subcommand": "annotate-pose", "seed": ctx.seed, "settings": s });

    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut manifest = crate::data::read_manifest(manifest_path)?;
    let mut dataset = load_dataset(manifest_path)?;
    for s in &mut dataset.samples {
        s.pose = None;
    }
    let skipped = crate::data::annotate_poses(&mut dataset.samples, &shape3d);
    for (rec, sample) in manifest.samples.iter_mut().zip(&dataset.samples) {
        rec.pose = sample.pose;
        // the new manifest lives elsewhere, so point back at the inputs
        rec.image = absolute(&root.join(&rec.image))?;
        if let Some(p) = &rec.pts {
            rec.pts = Some(absolute(&root.join(p))?);
        }
    }
    manifest.config = config.clone();
    let out = ctx.out()?;
    crate::data::write_manifest(out.join(crate::data::MANIFEST_FILE), &manifest)?;
    let poses: Vec<(String, HeadPose)> = dataset
        .samples
        .iter()
        .filter_map(|s| s.pose.map(|p| (s.id.clone(), p)))
        .collect();
    write_pose_csv(out.join(crate::data::POSE_INDEX_FILE), &poses, Some(&config))?;
    write_json(&out.join("skipped.json"), &json!({ "config": config, "skipped": skipped }))?;
    info!("annotated {} samples, skipped {}", poses.len(), skipped.len());
    Ok(())
}

// ---------------------------------------------------------------- train-pose

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPoseSettings {
    pub train: Option<PathBuf>,
    pub shape3d: Option<PathBuf>,
    #[serde(flatten)]
    pub training: TrainConfig,
}

fn train_pose(ctx: &Ctx, a: &TrainPoseArgs) -> CliResult<()> {
    let mut s: TrainPoseSettings = ctx.settings()?;
    set_path(&mut s.train, &a.train);
    set_path(&mut s.shape3d, &a.shape3d);
    let t = &mut s.training;
    set(&mut t.learning_rate, a.learning_rate);
    set(&mut t.momentum, a.momentum);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.max_epochs, a.max_epochs);
    set(&mut t.patience, a.patience);
    set(&mut t.jitter_copies, a.jitter_copies);
    set(&mut t.jitter_fraction, a.jitter_fraction);
    set(&mut t.validation_fraction, a.validation_fraction);
    t.seed = ctx.seed;
    usage_on_err(s.training.validate())?;
    let shape3d = load_shape3d(&s.shape3d)?;
    let config = json!({ "subcommand": "train-pose", "seed": ctx.seed, "settings": s });

    let dataset = load_dataset(required(&s.train, "train")?)?;
    let (samples, skipped) = ensure_poses(dataset.samples, &shape3d);
    let pose_samples: Vec<PoseSample> = samples
        .iter()
        .map(|x| PoseSample { image: &x.image, bb: x.bb, pose: x.pose.expect("poses ensured") })
        .collect();
    let trained = train(&pose_samples, &s.training)?;

    let out = ctx.out()?;
    trained.net.save_with_provenance(out.join(POSE_NET_FILE), &config)?;
    let curve = out.join("learning_curve.csv");
    let mut w = csv_writer(&curve, Some(&config))?;
    w.write_record(["epoch", "train_rmse_deg", "val_rmse_deg", "running_loss"]).map_err(Error::from)?;
    for e in &trained.history.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.train_rmse_deg.to_string(),
            e.val_rmse_deg.to_string(),
            e.running_loss.map_or(String::new(), |v| v.to_string()),
        ])
        .map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::io(&curve, e))?;
    write_json(
        &out.join("train_pose.json"),
        &json!({ "config": config, "history": trained.history, "skipped": skipped }),
    )?;
    Ok(())
}

// ---------------------------------------------------------------- train-cascade

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCascadeSettings {
    pub train: Option<PathBuf>,
    pub shape3d: Option<PathBuf>,
    #[serde(flatten)]
    pub cascade: CascadeConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExemplarFile {
    pub config: Value,
    pub exemplars: Vec<TrainExemplar>,
}

pub fn read_exemplars(path: &Path) -> crate::Result<Vec<TrainExemplar>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ExemplarFile = serde_json::from_str(&text)?;
    Ok(file.exemplars)
}

fn train_cascade_cmd(ctx: &Ctx, a: &TrainCascadeArgs) -> CliResult<()> {
    let mut s: TrainCascadeSettings = ctx.settings()?;
    set_path(&mut s.train, &a.train);
    set_path(&mut s.shape3d, &a.shape3d);
    let c = &mut s.cascade;
    set(&mut c.stages, a.stages);
    set(&mut c.ferns_per_stage, a.ferns_per_stage);
    set(&mut c.fern_depth, a.fern_depth);
    set(&mut c.feature_pool, a.feature_pool);
    set(&mut c.shrinkage, a.shrinkage);
    set(&mut c.augmentation, a.augmentation);
    set(&mut c.max_offset, a.max_offset);
    c.seed = ctx.seed;
    usage_on_err(s.cascade.validate())?;
    let shape3d = load_shape3d(&s.shape3d)?;
    let config = json!({ "subcommand": "train-cascade", "seed": ctx.seed, "settings": s });

    let dataset = load_dataset(required(&s.train, "train")?)?;
    let (samples, skipped) = ensure_poses(dataset.samples, &shape3d);
    let triples: Vec<CascadeSample> = samples
        .iter()
        .filter_map(|x| x.landmarks.as_ref().map(|l| CascadeSample { image: &x.image, bb: x.bb, shape: l }))
        .collect();
    let model = train_cascade(&triples, &s.cascade)?;
    let exemplars = samples.iter().map(TrainExemplar::from_sample).collect::<crate::Result<Vec<_>>>()?;

    let out = ctx.out()?;
    model.save(out.join(CASCADE_FILE))?;
    let trace = out.join("stage_trace.csv");
    let mut w = csv_writer(&trace, Some(&config))?;
    w.write_record(["stage", "rms_residual", "mean_normalized_error"]).map_err(Error::from)?;
    for r in model.trace() {
        w.write_record([
            r.stage.to_string(),
            r.rms_residual.to_string(),
            r.mean_normalized_error.map_or(String::new(), |v| v.to_string()),
        ])
        .map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::io(&trace, e))?;
    let file = ExemplarFile { config: config.clone(), exemplars };
    write_json(&out.join(EXEMPLARS_FILE), &serde_json::to_value(&file).map_err(Error::from)?)?;
    if !skipped.is_empty() {
        write_json(&out.join("skipped.json"), &json!({ "config": config, "skipped": skipped }))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- align / evaluate / compare

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub cascade: Option<PathBuf>,
    pub exemplars: Option<PathBuf>,
    pub pose_net: Option<PathBuf>,
    pub pose_source: Option<PoseSourceArg>,
    pub shape3d: Option<PathBuf>,
}

impl ModelSettings {
    fn apply(&mut self, a: &ModelArgs) {
        set_path(&mut self.cascade, &a.cascade);
        set_path(&mut self.exemplars, &a.exemplars);
        set_path(&mut self.pose_net, &a.pose_net);
        set_opt(&mut self.pose_source, a.pose_source);
        set_path(&mut self.shape3d, &a.shape3d);
    }

    fn pose_source(&self) -> PoseSource {
        match self.pose_source {
            Some(p) => p.into(),
            None if self.pose_net.is_some() => PoseSource::Net,
            None => PoseSource::Solver,
        }
    }
}

struct Loaded {
    cascade: CascadeModel,
    exemplars: Vec<TrainExemplar>,
    pose_net: Option<PoseNet>,
    shape3d: Shape3D,
}

impl Loaded {
    fn new(m: &ModelSettings) -> CliResult<Loaded> {
        let cascade_path = required(&m.cascade, "cascade")?;
        let exemplars_path = match &m.exemplars {
            Some(p) => p.clone(),
            None => cascade_path.parent().unwrap_or(Path::new(".")).join(EXEMPLARS_FILE),
        };
        if m.pose_source() == PoseSource::Net && m.pose_net.is_none() {
            return Err(CliError::usage("pose source 'net' needs --pose-net"));
        }
        Ok(Loaded {
            cascade: CascadeModel::load(cascade_path)?,
            exemplars: read_exemplars(&exemplars_path)?,
            pose_net: m.pose_net.as_ref().map(PoseNet::load).transpose()?,
            shape3d: load_shape3d(&m.shape3d)?,
        })
    }

    fn pipeline(&self) -> Pipeline<'_> {
        Pipeline {
            cascade: &self.cascade,
            pose_net: self.pose_net.as_ref(),
            exemplars: &self.exemplars,
            shape3d: &self.shape3d,
        }
    }
}

fn parse_scheme(s: &str) -> CliResult<InitScheme> {
    usage_on_err(s.parse())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignSettings {
    #[serde(flatten)]
    pub model: ModelSettings,
    pub scheme: Option<String>,
    pub manifest: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub bbox: Option<BoundingBox>,
}

fn align(ctx: &Ctx, a: &AlignArgs) -> CliResult<()> {
    let mut s: AlignSettings = ctx.settings()?;
    s.model.apply(&a.model);
    set_opt(&mut s.scheme, a.scheme.clone());
    set_path(&mut s.manifest, &a.manifest);
    set_path(&mut s.image, &a.image);
    if let Some(b) = &a.bbox {
        s.bbox = Some(usage_on_err(BoundingBox::new(b[0], b[1], b[2], b[3]))?);
    }
    let scheme = parse_scheme(s.scheme.as_deref().unwrap_or("3d"))?;
    let source = s.model.pose_source();
    let config = json!({ "subcommand": "align", "seed": ctx.seed, "settings": s, "scheme": scheme });

    let samples = match (&s.manifest, &s.image) {
        (Some(m), None) => load_dataset(m)?.samples,
        (None, Some(img)) => {
            let bb = s.bbox.ok_or_else(|| CliError::usage("--image needs --bbox"))?;
            let id = img.file_stem().map_or("image".into(), |x| x.to_string_lossy().into_owned());
            vec![Sample { id, image: GrayImage::load(img)?, bb, landmarks: None, pose: None }]
        }
        (Some(_), Some(_)) => return Err(CliError::usage("give either --manifest or --image")),
        (None, None) => return Err(CliError::usage("missing --manifest or --image")),
    };
    let loaded = Loaded::new(&s.model)?;
    let pipeline = loaded.pipeline();
    let out = ctx.out()?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let pose = if scheme.needs_pose() {
            let pose = match source {
                PoseSource::Net => pipeline.net_pose(&sample.image, &sample.bb)?,
                PoseSource::Solver => {
                    let l = sample.landmarks.as_ref().ok_or_else(|| {
                        CliError::usage(format!("pose source 'solver' needs landmarks for {}", sample.id))
                    })?;
                    fit_pose_from_landmarks(l, &loaded.shape3d)?.pose
                }
            };
            Some(pose)
        } else {
            None
        };
        let seed = crate::eval::sample_seed(ctx.seed, i);
        let (_, shape) = pipeline.align(&sample.image, &sample.bb, scheme, pose.as_ref(), seed)?;
        let path = out.join(format!("{}.pts", sample.id));
        write_pts(&path, &shape)?;
        records.push(json!({ "id": sample.id, "pts": format!("{}.pts", sample.id), "pose": pose }));
    }
    write_json(&out.join("align.json"), &json!({ "config": config, "outputs": records }))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateSettings {
    #[serde(flatten)]
    pub model: ModelSettings,
    pub scheme: Option<String>,
    pub schemes: Option<Vec<String>>,
    pub seeds: Option<Vec<u64>>,
    pub test: Option<PathBuf>,
    pub threshold: Option<f64>,
}

fn run_comparison(ctx: &Ctx, s: &EvaluateSettings, specs: Vec<SchemeSpec>, stem: &str, subcommand: &str) -> CliResult<()> {
    let threshold = s.threshold.unwrap_or(DEFAULT_FAILURE_THRESHOLD);
    if !(threshold > 0.0) {
        return Err(CliError::usage("threshold must be positive"));
    }
    let config = json!({ "subcommand": subcommand, "seed": ctx.seed, "settings": s, "specs": specs });
    let loaded = Loaded::new(&s.model)?;
    let mut dataset = load_dataset(required(&s.test, "test")?)?;
    // ground-truth poses always come from the landmarks
    for x in &mut dataset.samples {
        x.pose = None;
    }
    let (samples, mut skipped) = ensure_poses(dataset.samples, &loaded.shape3d);
    let eval_samples = EvalSample::from_samples(&samples);
    let mut report = compare_schemes(&loaded.pipeline(), &eval_samples, &specs, threshold);
    for r in &mut report.reports {
        r.skipped.splice(0..0, skipped.iter().cloned());
    }
    skipped.clear();
    for r in &report.reports {
        info!(
            "{}: mean error {:.4}, failures {} / {}",
            r.label,
            r.mean_error,
            r.failures,
            r.records.len()
        );
    }
    write_comparison(ctx.out()?, stem, &report, &config)?;
    Ok(())
}

fn evaluate(ctx: &Ctx, a: &EvaluateArgs) -> CliResult<()> {
    let mut s: EvaluateSettings = ctx.settings()?;
    s.model.apply(&a.model);
    set_opt(&mut s.scheme, a.scheme.clone());
    set_path(&mut s.test, &a.test);
    set_opt(&mut s.threshold, a.threshold);
    let scheme = parse_scheme(s.scheme.as_deref().unwrap_or("3d"))?;
    let spec = SchemeSpec { scheme, pose_source: s.model.pose_source(), seed: ctx.seed };
    run_comparison(ctx, &s, vec![spec], "evaluate", "evaluate")
}

fn compare(ctx: &Ctx, a: &CompareArgs) -> CliResult<()> {
    let mut s: EvaluateSettings = ctx.settings()?;
    s.model.apply(&a.model);
    set_opt(&mut s.schemes, a.schemes.clone());
    set_opt(&mut s.seeds, a.seeds.clone());
    set_path(&mut s.test, &a.test);
    set_opt(&mut s.threshold, a.threshold);
    let names = s
        .schemes
        .clone()
        .unwrap_or_else(|| ["random:1", "mean", "random:5", "3d", "knn:1"].map(String::from).to_vec());
    // per-run seeds are offsets of the global seed
    let seeds: Vec<u64> = s
        .seeds
        .clone()
        .unwrap_or_else(|| (0..5).collect())
        .into_iter()
        .map(|x| ctx.seed.wrapping_add(x))
        .collect();
    if seeds.is_empty() {
        return Err(CliError::usage("need at least one seed"));
    }
    let source = s.model.pose_source();
    let mut specs = Vec::new();
    for name in &names {
        let scheme = parse_scheme(name)?;
        if matches!(scheme, InitScheme::Random { .. }) {
            specs.extend(seeds.iter().map(|&seed| SchemeSpec { scheme, pose_source: source, seed }));
        } else {
            specs.push(SchemeSpec { scheme, pose_source: source, seed: seeds[0] });
        }
    }
    run_comparison(ctx, &s, specs, "compare", "compare")
}

// ---------------------------------------------------------------- entry

fn dispatch(cli: &Cli) -> CliResult<()> {
    let ctx = Ctx::new(&cli.common)?;
    match &cli.command {
        Command::SynthGen(a) => synth_gen(&ctx, a),
        Command::AnnotatePose(a) => annotate_pose(&ctx, a),
        Command::TrainPose(a) => train_pose(&ctx, a),
        Command::TrainCascade(a) => train_cascade_cmd(&ctx, a),
        Command::Align(a) => align(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Compare(a) => compare(&ctx, a),
    }
}

/// Runs the command line and returns the process exit status. Errors are
/// reported as a single JSON line on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { EXIT_USAGE } else { 0 };
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first).line());
            return EXIT_USAGE;
        }
    };
    if cli.common.verbose {
        let _ = env_logger::Builder::new().filter_level(log::LevelFilter::Info).try_init();
    }
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}
