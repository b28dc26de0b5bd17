//! Cascaded pose regression with random ferns over shape-indexed,
//! interpolated pixel-difference features.
//!
//! Shapes are regressed in a box-normalized frame: a point `p` inside box
//! `bb` becomes `(p - center(bb)) / bb.w`.

use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::eval::inter_ocular_indices;
use crate::geometry::{BoundingBox, Shape2D};
use crate::gray::GrayImage;
use crate::init::{aggregate_median, random_indices, InitSet};
use crate::linalg::gemm;

const MODEL_KIND: &str = "cascade";
/// Largest allowed probe offset, in box widths.
pub const MAX_PROBE_OFFSET: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    pub stages: usize,
    pub ferns_per_stage: usize,
    pub fern_depth: usize,
    pub feature_pool: usize,
    pub shrinkage: f64,
    /// Random initializations per training sample.
    pub augmentation: usize,
    /// Radius of the probe offset disc, in box widths.
    pub max_offset: f64,
    pub seed: u64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            stages: 100,
            ferns_per_stage: 10,
            fern_depth: 5,
            feature_pool: 400,
            shrinkage: 0.1,
            augmentation: 20,
            max_offset: 0.03,
            seed: 0,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.stages,
            self.ferns_per_stage,
            self.fern_depth,
            self.feature_pool,
            self.augmentation,
        ];
        if counts.contains(&0) {
            return Err(Error::invalid("cascade sizes must all be at least 1"));
        }
        if self.fern_depth > 16 || self.fern_depth > self.feature_pool {
            return Err(Error::invalid("fern depth must be <= 16 and <= the feature pool"));
        }
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return Err(Error::invalid("shrinkage must lie in (0, 1]"));
        }
        if !(0.0..=MAX_PROBE_OFFSET).contains(&self.max_offset) {
            return Err(Error::invalid(format!(
                "max offset must lie in [0, {MAX_PROBE_OFFSET}]"
            )));
        }
        Ok(())
    }
}

/// `alpha * x_a + (1 - alpha) * x_b + offset`, offset in box widths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub a: usize,
    pub b: usize,
    pub alpha: f64,
    pub offset: [f64; 2],
}

impl Probe {
    /// Position in the box-normalized frame of `shape` (interleaved x, y).
    #[inline]
    fn locate(&self, shape: &[f64]) -> (f64, f64) {
        let (a, b, t) = (2 * self.a, 2 * self.b, self.alpha);
        (
            t * shape[a] + (1.0 - t) * shape[b] + self.offset[0],
            t * shape[a + 1] + (1.0 - t) * shape[b + 1] + self.offset[1],
        )
    }

    fn validate(&self, k: usize) -> Result<()> {
        let [ox, oy] = self.offset;
        let ok = self.a < k
            && self.b < k
            && (0.0..=1.0).contains(&self.alpha)
            && ox.hypot(oy) <= MAX_PROBE_OFFSET * (1.0 + 1e-12);
        if ok {
            Ok(())
        } else {
            Err(Error::Model(format!("invalid probe {self:?} for {k} landmarks")))
        }
    }
}

/// Intensity at the first probe minus intensity at the second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureDef {
    pub probes: [Probe; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fern {
    /// Indices into the stage's feature pool; bit `d` of the bin is set when
    /// feature `features[d]` exceeds `thresholds[d]`.
    pub features: Vec<usize>,
    pub thresholds: Vec<f64>,
    /// `2^D` updates of `2K` normalized coordinates each.
    pub updates: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Fern {
    #[inline]
    fn bin(&self, values: &[f64]) -> usize {
        self.features
            .iter()
            .zip(&self.thresholds)
            .enumerate()
            .fold(0, |bin, (d, (&f, &t))| bin | (usize::from(values[f] > t) << d))
    }

    fn update(&self, bin: usize, k2: usize) -> &[f64] {
        &self.updates[bin * k2..(bin + 1) * k2]
    }

    fn max_update(&self) -> f64 {
        self.updates.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub features: Vec<FeatureDef>,
    pub ferns: Vec<Fern>,
    /// Bound on `|dS|_inf` for this stage: the sum over ferns of the largest
    /// stored update coordinate.
    bound: f64,
    /// Pool entries some fern reads.
    used: Vec<usize>,
}

impl Stage {
    fn new(features: Vec<FeatureDef>, ferns: Vec<Fern>) -> Stage {
        let mut stage = Stage {
            features,
            ferns,
            bound: 0.0,
            used: Vec::new(),
        };
        stage.refresh();
        stage
    }

    fn refresh(&mut self) {
        self.bound = self.ferns.iter().map(Fern::max_update).sum();
        let mut used: Vec<usize> = self.ferns.iter().flat_map(|f| f.features.iter().copied()).collect();
        used.sort_unstable();
        used.dedup();
        self.used = used;
    }

    pub fn update_bound(&self) -> f64 {
        self.bound
    }
}

/// Error statistics of the training instances after a stage (stage 0 is the
/// augmented initialization).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    /// Root mean square landmark residual in box widths.
    pub rms_residual: f64,
    /// Mean inter-ocular normalized error, for 68-landmark shapes.
    pub mean_normalized_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    config: CascadeConfig,
    num_landmarks: usize,
    train_samples: usize,
    trace: Vec<StageRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    config: CascadeConfig,
    num_landmarks: usize,
    train_samples: usize,
    /// Mean training shape in the box-normalized frame.
    mean_shape: Shape2D,
    stages: Vec<Stage>,
    trace: Vec<StageRecord>,
}

/// A training triple.
#[derive(Debug, Clone, Copy)]
pub struct CascadeSample<'a> {
    pub image: &'a GrayImage,
    pub bb: BoundingBox,
    pub shape: &'a Shape2D,
}

pub fn to_normalized(shape: &Shape2D, bb: &BoundingBox) -> Vec<f64> {
    let c = bb.center();
    shape
        .points()
        .iter()
        .flat_map(|p| [(p.x - c.x) / bb.w, (p.y - c.y) / bb.w])
        .collect()
}

pub fn from_normalized(flat: &[f64], bb: &BoundingBox) -> Result<Shape2D> {
    let c = bb.center();
    let pixels: Vec<f64> = flat
        .chunks_exact(2)
        .flat_map(|p| [c.x + bb.w * p[0], c.y + bb.w * p[1]])
        .collect();
    Shape2D::from_flat(&pixels)
}

#[inline]
fn probe_value(image: &GrayImage, bb: &BoundingBox, shape: &[f64], probe: &Probe) -> f64 {
    let (u, v) = probe.locate(shape);
    let c = bb.center();
    image.sample_clamped(c.x + bb.w * u, c.y + bb.w * v)
}

#[inline]
fn feature_value(image: &GrayImage, bb: &BoundingBox, shape: &[f64], def: &FeatureDef) -> f64 {
    probe_value(image, bb, shape, &def.probes[0]) - probe_value(image, bb, shape, &def.probes[1])
}

/// Shape-indexed pixel differences for every definition in the pool.
pub fn extract_features(
    image: &GrayImage,
    shape: &Shape2D,
    bb: &BoundingBox,
    defs: &[FeatureDef],
) -> Result<Vec<f64>> {
    for def in defs {
        for p in &def.probes {
            p.validate(shape.len())?;
        }
    }
    let norm = to_normalized(shape, bb);
    Ok(defs.iter().map(|d| feature_value(image, bb, &norm, d)).collect())
}

fn sample_probe(k: usize, max_offset: f64, rng: &mut impl Rng) -> Probe {
    let r = max_offset * rng.gen::<f64>().sqrt();
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    Probe {
        a: rng.gen_range(0..k),
        b: rng.gen_range(0..k),
        alpha: rng.gen(),
        offset: [r * theta.cos(), r * theta.sin()],
    }
}

fn sample_pool(k: usize, cfg: &CascadeConfig, rng: &mut impl Rng) -> Vec<FeatureDef> {
    (0..cfg.feature_pool)
        .map(|_| FeatureDef {
            probes: [sample_probe(k, cfg.max_offset, rng), sample_probe(k, cfg.max_offset, rng)],
        })
        .collect()
}

/// Mean inter-ocular normalized error between normalized-frame shapes.
fn normalized_frame_error(cur: &[f64], gt: &[f64], eyes: (usize, usize)) -> f64 {
    let k = gt.len() / 2;
    let dist: f64 = (0..k)
        .map(|i| (cur[2 * i] - gt[2 * i]).hypot(cur[2 * i + 1] - gt[2 * i + 1]))
        .sum();
    let (a, b) = eyes;
    let iod = (gt[2 * a] - gt[2 * b]).hypot(gt[2 * a + 1] - gt[2 * b + 1]);
    dist / k as f64 / iod
}

struct TrainState<'a> {
    samples: &'a [CascadeSample<'a>],
    /// Ground truth per sample, normalized frame.
    truth: Vec<Vec<f64>>,
    /// `(sample index, current normalized shape)` per augmented instance.
    owner: Vec<usize>,
    current: Vec<f64>,
    k2: usize,
}

impl TrainState<'_> {
    fn len(&self) -> usize {
        self.owner.len()
    }

    fn shape(&self, i: usize) -> &[f64] {
        &self.current[i * self.k2..(i + 1) * self.k2]
    }

    fn residuals(&self) -> Vec<f64> {
        let mut r = vec![0.0; self.current.len()];
        for (i, &s) in self.owner.iter().enumerate() {
            let base = i * self.k2;
            for (j, g) in self.truth[s].iter().enumerate() {
                r[base + j] = g - self.current[base + j];
            }
        }
        r
    }

    fn record(&self, stage: usize, eyes: Option<(usize, usize)>) -> StageRecord {
        let r = self.residuals();
        let ss: f64 = r.iter().map(|v| v * v).sum();
        let rms = (ss / (self.len() * self.k2 / 2) as f64).sqrt();
        let mean_normalized_error = eyes.map(|e| {
            let total: f64 = (0..self.len())
                .map(|i| normalized_frame_error(self.shape(i), &self.truth[self.owner[i]], e))
                .sum();
            total / self.len() as f64
        });
        StageRecord {
            stage,
            rms_residual: rms,
            mean_normalized_error,
        }
    }
}

/// Picks one feature per depth level: the pool entry most correlated (in
/// absolute value) with the residuals projected on a random direction.
fn select_fern_features(
    feats: &[f64],
    stats: &FeatureStats,
    residuals: &[f64],
    n: usize,
    k2: usize,
    depth: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let f = stats.mean.len();
    let dirs: Vec<f64> = (0..k2 * depth).map(|_| rng.sample(StandardNormal)).collect();
    let mut proj = vec![0.0; n * depth];
    gemm(n, k2, depth, residuals, false, &dirs, false, 0.0, &mut proj);
    let mut cross = vec![0.0; f * depth];
    gemm(f, n, depth, feats, true, &proj, false, 0.0, &mut cross);

    let mut chosen: Vec<usize> = Vec::with_capacity(depth);
    for d in 0..depth {
        let (mut sum, mut sq) = (0.0, 0.0);
        for i in 0..n {
            let y = proj[i * depth + d];
            sum += y;
            sq += y * y;
        }
        let y_mean = sum / n as f64;
        let y_sd = (sq / n as f64 - y_mean * y_mean).max(0.0).sqrt();
        let mut best = None;
        let mut best_corr = -1.0;
        for j in 0..f {
            if chosen.contains(&j) {
                continue;
            }
            let denom = stats.sd[j] * y_sd;
            let corr = if denom > 0.0 {
                ((cross[j * depth + d] / n as f64 - stats.mean[j] * y_mean) / denom).abs()
            } else {
                0.0
            };
            if corr > best_corr {
                best_corr = corr;
                best = Some(j);
            }
        }
        chosen.push(best.expect("pool is larger than the fern depth"));
    }
    chosen
}

struct FeatureStats {
    mean: Vec<f64>,
    sd: Vec<f64>,
    min: Vec<f64>,
    max: Vec<f64>,
}

impl FeatureStats {
    fn new(feats: &[f64], n: usize, f: usize) -> FeatureStats {
        let mut sum = vec![0.0; f];
        let mut sq = vec![0.0; f];
        let mut min = vec![f64::INFINITY; f];
        let mut max = vec![f64::NEG_INFINITY; f];
        for row in feats.chunks_exact(f) {
            for (j, &v) in row.iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let sd = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt())
            .collect();
        FeatureStats { mean, sd, min, max }
    }
}

/// Trains a cascade. Every sample is paired with `augmentation` random
/// training shapes (transferred into its box) as starting points.
pub fn train_cascade(samples: &[CascadeSample], cfg: &CascadeConfig) -> Result<CascadeModel> {
    cfg.validate()?;
    if samples.len() < 2 {
        return Err(Error::invalid("cascade training needs at least 2 samples"));
    }
    let k = samples[0].shape.len();
    if let Some(s) = samples.iter().find(|s| s.shape.len() != k) {
        return Err(Error::mismatch(format!("{k} landmarks"), format!("{}", s.shape.len())));
    }
    for s in samples {
        s.bb.validate()?;
    }
    let k2 = 2 * k;
    let eyes = inter_ocular_indices(k);

    let truth: Vec<Vec<f64>> = samples.iter().map(|s| to_normalized(s.shape, &s.bb)).collect();
    let mut mean = vec![0.0; k2];
    for t in &truth {
        for (m, v) in mean.iter_mut().zip(t) {
            *m += v / samples.len() as f64;
        }
    }

    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(1);
    let mut owner = Vec::with_capacity(samples.len() * cfg.augmentation);
    let mut current = Vec::with_capacity(samples.len() * cfg.augmentation * k2);
    for i in 0..samples.len() {
        for j in random_indices(samples.len(), cfg.augmentation, &mut aug_rng) {
            owner.push(i);
            current.extend_from_slice(&truth[j]);
        }
    }
    let mut state = TrainState {
        samples,
        truth,
        owner,
        current,
        k2,
    };
    let n = state.len();
    let f = cfg.feature_pool;
    let bins = 1usize << cfg.fern_depth;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut trace = vec![state.record(0, eyes)];
    info!(
        "cascade: {} samples x {} inits, initial rms {:.5}",
        samples.len(),
        cfg.augmentation,
        trace[0].rms_residual
    );
    let mut stages = Vec::with_capacity(cfg.stages);
    let mut feats = vec![0.0; n * f];
    for t in 1..=cfg.stages {
        let pool = sample_pool(k, cfg, &mut rng);
        for i in 0..n {
            let s = &state.samples[state.owner[i]];
            let shape = state.shape(i);
            for (v, def) in feats[i * f..(i + 1) * f].iter_mut().zip(&pool) {
                *v = feature_value(s.image, &s.bb, shape, def);
            }
        }
        let stats = FeatureStats::new(&feats, n, f);

        let mut ferns = Vec::with_capacity(cfg.ferns_per_stage);
        for m in 0..cfg.ferns_per_stage {
            let residuals = state.residuals();
            let chosen =
                select_fern_features(&feats, &stats, &residuals, n, k2, cfg.fern_depth, &mut rng);
            let thresholds: Vec<f64> = chosen
                .iter()
                .map(|&j| {
                    let (lo, hi) = (stats.min[j], stats.max[j]);
                    if hi > lo {
                        rng.gen_range(lo..=hi)
                    } else {
                        lo
                    }
                })
                .collect();
            let mut fern = Fern {
                features: chosen,
                thresholds,
                updates: vec![0.0; bins * k2],
                counts: vec![0; bins],
            };
            let assigned: Vec<usize> = (0..n).map(|i| fern.bin(&feats[i * f..(i + 1) * f])).collect();
            for (i, &b) in assigned.iter().enumerate() {
                fern.counts[b] += 1;
                for (u, r) in fern.updates[b * k2..(b + 1) * k2]
                    .iter_mut()
                    .zip(&residuals[i * k2..(i + 1) * k2])
                {
                    *u += r;
                }
            }
            for b in 0..bins {
                // empty bins keep a zero update
                if fern.counts[b] > 0 {
                    let scale = cfg.shrinkage / fern.counts[b] as f64;
                    for u in &mut fern.updates[b * k2..(b + 1) * k2] {
                        *u *= scale;
                    }
                }
            }
            if fern.updates.iter().any(|u| !u.is_finite()) {
                return Err(Error::NonFiniteUpdate { stage: t, fern: m });
            }
            for (i, &b) in assigned.iter().enumerate() {
                let update = fern.update(b, k2);
                for (c, u) in state.current[i * k2..(i + 1) * k2].iter_mut().zip(update) {
                    *c += u;
                }
            }
            ferns.push(fern);
        }
        stages.push(Stage::new(pool, ferns));
        let record = state.record(t, eyes);
        if t == 1 || t % 10 == 0 || t == cfg.stages {
            info!(
                "cascade stage {t}: rms {:.5} mean error {:?}",
                record.rms_residual, record.mean_normalized_error
            );
        }
        trace.push(record);
    }

    Ok(CascadeModel {
        config: cfg.clone(),
        num_landmarks: k,
        train_samples: samples.len(),
        mean_shape: Shape2D::from_flat(&mean)?,
        stages,
        trace,
    })
}

impl CascadeModel {
    pub fn config(&self) -> &CascadeConfig {
        &self.config
    }

    pub fn num_landmarks(&self) -> usize {
        self.num_landmarks
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Per-stage training error, starting with the initialization.
    pub fn trace(&self) -> &[StageRecord] {
        &self.trace
    }

    /// Mean training shape in the box-normalized frame.
    pub fn mean_shape(&self) -> &Shape2D {
        &self.mean_shape
    }

    /// Applies `f` to every stored fern update.
    pub fn map_updates(&mut self, mut f: impl FnMut(&mut f64)) {
        for stage in &mut self.stages {
            for fern in &mut stage.ferns {
                fern.updates.iter_mut().for_each(&mut f);
            }
            stage.refresh();
        }
    }

    fn check_k(&self, shape: &Shape2D) -> Result<()> {
        if shape.len() != self.num_landmarks {
            return Err(Error::mismatch(
                format!("{} landmarks", self.num_landmarks),
                format!("{} landmarks", shape.len()),
            ));
        }
        Ok(())
    }

    /// Runs every stage from one initialization and returns the shape after
    /// each stage (index 0 is the initialization itself).
    pub fn trajectory(&self, image: &GrayImage, bb: &BoundingBox, init: &Shape2D) -> Result<Vec<Shape2D>> {
        self.check_k(init)?;
        bb.validate()?;
        let mut shapes = Vec::with_capacity(self.stages.len() + 1);
        shapes.push(init.clone());
        let mut cur = to_normalized(init, bb);
        for t in 0..self.stages.len() {
            self.apply_stage(t, image, bb, &mut cur)?;
            shapes.push(from_normalized(&cur, bb)?);
        }
        Ok(shapes)
    }

    /// Runs every stage from one initialization.
    pub fn run_single(&self, image: &GrayImage, bb: &BoundingBox, init: &Shape2D) -> Result<Shape2D> {
        self.check_k(init)?;
        bb.validate()?;
        let mut cur = to_normalized(init, bb);
        for t in 0..self.stages.len() {
            self.apply_stage(t, image, bb, &mut cur)?;
        }
        from_normalized(&cur, bb)
    }

    fn apply_stage(&self, t: usize, image: &GrayImage, bb: &BoundingBox, cur: &mut [f64]) -> Result<()> {
        let stage = &self.stages[t];
        let k2 = cur.len();
        let mut values = vec![0.0; stage.features.len()];
        for &j in &stage.used {
            values[j] = feature_value(image, bb, cur, &stage.features[j]);
        }
        let mut delta = vec![0.0; k2];
        for fern in &stage.ferns {
            for (d, u) in delta.iter_mut().zip(fern.update(fern.bin(&values), k2)) {
                *d += u;
            }
        }
        let norm = delta.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
        if !(norm <= stage.bound * (1.0 + 1e-12)) {
            return Err(Error::NonFiniteUpdate { stage: t + 1, fern: 0 });
        }
        for (c, d) in cur.iter_mut().zip(&delta) {
            *c += d;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(file))
    }

    pub fn write(&self, w: impl std::io::Write) -> Result<()> {
        let meta = ModelMeta {
            config: self.config.clone(),
            num_landmarks: self.num_landmarks,
            train_samples: self.train_samples,
            trace: self.trace.clone(),
        };
        let mut features = Vec::new();
        let mut fern_features = Vec::new();
        let mut thresholds = Vec::new();
        let mut updates = Vec::new();
        let mut counts = Vec::new();
        for stage in &self.stages {
            for def in &stage.features {
                for p in &def.probes {
                    features.extend([p.a as f64, p.b as f64, p.alpha, p.offset[0], p.offset[1]]);
                }
            }
            for fern in &stage.ferns {
                fern_features.extend(fern.features.iter().map(|&j| j as f64));
                thresholds.extend_from_slice(&fern.thresholds);
                updates.extend_from_slice(&fern.updates);
                counts.extend(fern.counts.iter().map(|&c| c as f64));
            }
        }
        let mean = self.mean_shape.to_flat();
        container::write(
            w,
            MODEL_KIND,
            &meta,
            &[
                ("mean_shape", &mean),
                ("features", &features),
                ("fern_features", &fern_features),
                ("fern_thresholds", &thresholds),
                ("fern_updates", &updates),
                ("fern_counts", &counts),
            ],
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CascadeModel> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(file))
    }

    pub fn read(r: impl std::io::Read) -> Result<CascadeModel> {
        let mut c = container::read(r, MODEL_KIND)?;
        let meta: ModelMeta = serde_json::from_value(c.meta.clone())?;
        let cfg = &meta.config;
        cfg.validate().map_err(|e| Error::Model(e.to_string()))?;
        let k = meta.num_landmarks;
        let (t, m, d, f) = (cfg.stages, cfg.ferns_per_stage, cfg.fern_depth, cfg.feature_pool);
        let bins = 1usize << d;
        let k2 = 2 * k;

        let take = |c: &mut container::Container, name: &str, len: usize| -> Result<Vec<f64>> {
            let v = c.take_array(name)?;
            if v.len() != len {
                return Err(Error::Model(format!(
                    "array '{name}' has {} values, expected {len}",
                    v.len()
                )));
            }
            Ok(v)
        };
        let mean = take(&mut c, "mean_shape", k2)?;
        let features = take(&mut c, "features", t * f * 10)?;
        let fern_features = take(&mut c, "fern_features", t * m * d)?;
        let thresholds = take(&mut c, "fern_thresholds", t * m * d)?;
        let updates = take(&mut c, "fern_updates", t * m * bins * k2)?;
        let counts = take(&mut c, "fern_counts", t * m * bins)?;

        let index = |v: f64, bound: usize| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < bound {
                Ok(v as usize)
            } else {
                Err(Error::Model(format!("index {v} out of range 0..{bound}")))
            }
        };
        let mut stages = Vec::with_capacity(t);
        for s in 0..t {
            let mut pool = Vec::with_capacity(f);
            for q in features[s * f * 10..(s + 1) * f * 10].chunks_exact(10) {
                let probe = |p: &[f64]| -> Result<Probe> {
                    let probe = Probe {
                        a: index(p[0], k)?,
                        b: index(p[1], k)?,
                        alpha: p[2],
                        offset: [p[3], p[4]],
                    };
                    probe.validate(k)?;
                    Ok(probe)
                };
                pool.push(FeatureDef {
                    probes: [probe(&q[..5])?, probe(&q[5..])?],
                });
            }
            let mut ferns = Vec::with_capacity(m);
            for j in 0..m {
                let r = (s * m + j) * d..(s * m + j + 1) * d;
                let u = (s * m + j) * bins;
                ferns.push(Fern {
                    features: fern_features[r.clone()]
                        .iter()
                        .map(|&v| index(v, f))
                        .collect::<Result<_>>()?,
                    thresholds: thresholds[r].to_vec(),
                    updates: updates[u * k2..(u + bins) * k2].to_vec(),
                    counts: counts[u..u + bins].iter().map(|&v| index(v, usize::MAX)).collect::<Result<_>>()?,
                });
            }
            stages.push(Stage::new(pool, ferns));
        }
        Ok(CascadeModel {
            config: meta.config,
            num_landmarks: k,
            train_samples: meta.train_samples,
            mean_shape: Shape2D::from_flat(&mean)?,
            stages,
            trace: meta.trace,
        })
    }
}

/// Runs the cascade from every initialization independently; several
/// results are combined by the per-coordinate median.
pub fn run_cascade_shapes(
    model: &CascadeModel,
    image: &GrayImage,
    bb: &BoundingBox,
    inits: &[Shape2D],
) -> Result<Shape2D> {
    let outputs: Vec<Shape2D> = inits
        .iter()
        .map(|s| model.run_single(image, bb, s))
        .collect::<Result<_>>()?;
    aggregate_median(&outputs)
}

pub fn run_cascade(
    model: &CascadeModel,
    image: &GrayImage,
    bb: &BoundingBox,
    inits: &InitSet,
) -> Result<Shape2D> {
    run_cascade_shapes(model, image, bb, &inits.shapes)
}
