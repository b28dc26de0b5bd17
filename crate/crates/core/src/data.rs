//! Dataset files (pts landmarks, box and pose CSVs, JSON manifests), pose
//! annotation, splits, and the synthetic face generator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Point2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::{project_weak_perspective, BoundingBox, HeadPose, Shape2D, Shape3D};
use crate::gray::GrayImage;
use crate::pose_solver::fit_pose_from_landmarks;

/// Box dilation used whenever a box is derived from landmarks.
pub const DEFAULT_BOX_DILATION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub bb: BoundingBox,
    pub landmarks: Option<Shape2D>,
    pub pose: Option<HeadPose>,
}

/// Tight landmark box grown by [`DEFAULT_BOX_DILATION`].
pub fn landmark_box(shape: &Shape2D) -> Result<BoundingBox> {
    BoundingBox::tight(shape)?.dilated(DEFAULT_BOX_DILATION)
}

// ---------------------------------------------------------------- pts files

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parses pts text. `path` is only used in error messages.
pub fn parse_pts(text: &str, path: &Path) -> Result<Shape2D> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut next = |what: &str| {
        lines
            .by_ref()
            .find(|(_, l)| !l.is_empty())
            .ok_or_else(|| parse_err(path, text.lines().count() + 1, format!("missing {what}")))
    };

    let (n, line) = next("version line")?;
    if !line.starts_with("version:") {
        return Err(parse_err(path, n, "expected 'version: 1'"));
    }
    let (n, line) = next("n_points line")?;
    let declared: usize = line
        .strip_prefix("n_points:")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| parse_err(path, n, "expected 'n_points: <count>'"))?;
    let (n, line) = next("'{'")?;
    if line != "{" {
        return Err(parse_err(path, n, "expected '{'"));
    }

    let mut points = Vec::with_capacity(declared);
    loop {
        let (n, line) = next("'}'")?;
        if line == "}" {
            break;
        }
        let coords: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(path, n, format!("bad coordinate: {e}")))?;
        if coords.len() != 2 || coords.iter().any(|c| !c.is_finite()) {
            return Err(parse_err(path, n, "expected two finite coordinates"));
        }
        points.push(Point2::new(coords[0], coords[1]));
    }
    if points.len() != declared {
        return Err(Error::CountMismatch {
            declared,
            actual: points.len(),
        });
    }
    Shape2D::new(points)
}

pub fn load_pts(path: impl AsRef<Path>) -> Result<Shape2D> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pts(&text, path)
}

/// Canonical pts text with six decimals per coordinate.
pub fn format_pts(shape: &Shape2D) -> String {
    let mut out = format!("version: 1\nn_points: {}\n{{\n", shape.len());
    for p in shape.points() {
        writeln!(out, "{:.6} {:.6}", p.x, p.y).expect("writing to a String");
    }
    out.push_str("}\n");
    out
}

pub fn write_pts(path: impl AsRef<Path>, shape: &Shape2D) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_pts(shape)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- CSV files

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BoxRow {
    id: String,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PoseRow {
    id: String,
    pitch: f64,
    yaw: f64,
    roll: f64,
}

/// Opens a CSV writer, optionally preceded by a `# <json>` comment line.
pub(crate) fn csv_writer(path: &Path, comment: Option<&Value>) -> Result<csv::Writer<fs::File>> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    if let Some(c) = comment {
        use std::io::Write;
        writeln!(file, "# {}", serde_json::to_string(c)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(csv::Writer::from_writer(file))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rows = Vec::new();
    for (i, row) in csv_reader(path)?.deserialize().enumerate() {
        rows.push(row.map_err(|e| parse_err(path, i + 2, e.to_string()))?);
    }
    Ok(rows)
}

/// Writes `id,x,y,w,h` rows.
pub fn write_bbox_csv(
    path: impl AsRef<Path>,
    rows: &[(String, BoundingBox)],
    comment: Option<&Value>,
) -> Result<()> {
    let mut w = csv_writer(path.as_ref(), comment)?;
    for (id, bb) in rows {
        w.serialize(BoxRow {
            id: id.clone(),
            x: bb.x,
            y: bb.y,
            w: bb.w,
            h: bb.h,
        })?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_bbox_csv(path: impl AsRef<Path>) -> Result<Vec<(String, BoundingBox)>> {
    read_rows::<BoxRow>(path.as_ref())?
        .into_iter()
        .map(|r| Ok((r.id, BoundingBox::new(r.x, r.y, r.w, r.h)?)))
        .collect()
}

/// Writes the pose index: `id,pitch,yaw,roll` rows.
pub fn write_pose_csv(
    path: impl AsRef<Path>,
    rows: &[(String, HeadPose)],
    comment: Option<&Value>,
) -> Result<()> {
    let mut w = csv_writer(path.as_ref(), comment)?;
    for (id, p) in rows {
        w.serialize(PoseRow {
            id: id.clone(),
            pitch: p.pitch,
            yaw: p.yaw,
            roll: p.roll,
        })?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_pose_csv(path: impl AsRef<Path>) -> Result<Vec<(String, HeadPose)>> {
    read_rows::<PoseRow>(path.as_ref())?
        .into_iter()
        .map(|r| Ok((r.id, HeadPose::new(r.pitch, r.yaw, r.roll)?)))
        .collect()
}

// ---------------------------------------------------------------- manifests

/// Where a sample's box came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxSource {
    Given,
    Landmarks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Paths are relative to the manifest's directory.
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pts: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox_source: Option<BoxSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<HeadPose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Configuration and seeds that produced the dataset.
    #[serde(default)]
    pub config: Value,
    pub samples: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BBOX_FILE: &str = "bboxes.csv";
pub const POSE_INDEX_FILE: &str = "poses.csv";

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: Value,
    pub samples: Vec<Sample>,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != 1 {
        return Err(Error::invalid(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    Ok(manifest)
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(manifest)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every sample of a manifest. Missing boxes fall back to the dilated
/// landmark box.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let manifest = read_manifest(manifest_path)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for rec in &manifest.samples {
        let image = GrayImage::load(root.join(&rec.image))?;
        let landmarks = rec.pts.as_ref().map(|p| load_pts(root.join(p))).transpose()?;
        let bb = match (&rec.bbox, &landmarks) {
            (Some(bb), _) => {
                bb.validate()?;
                *bb
            }
            (None, Some(shape)) => landmark_box(shape)?,
            (None, None) => {
                return Err(Error::invalid(format!(
                    "sample {} has neither a box nor landmarks",
                    rec.id
                )))
            }
        };
        if let Some(p) = &rec.pose {
            p.validate()?;
        }
        samples.push(Sample {
            id: rec.id.clone(),
            image,
            bb,
            landmarks,
            pose: rec.pose,
        });
    }
    Ok(Dataset {
        config: manifest.config,
        samples,
    })
}

/// Writes images (16-bit PNG), pts files, the box CSV, the pose index (when
/// any pose is known) and the manifest into `dir`. Returns the manifest path.
pub fn save_dataset(dir: impl AsRef<Path>, samples: &[Sample], config: &Value) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for sub in ["images", "pts"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let image = PathBuf::from("images").join(format!("{}.png", s.id));
        s.image.save(dir.join(&image))?;
        let pts = match &s.landmarks {
            Some(shape) => {
                let rel = PathBuf::from("pts").join(format!("{}.pts", s.id));
                write_pts(dir.join(&rel), shape)?;
                Some(rel)
            }
            None => None,
        };
        records.push(ManifestRecord {
            id: s.id.clone(),
            image,
            pts,
            bbox: Some(s.bb),
            bbox_source: Some(BoxSource::Given),
            pose: s.pose,
        });
    }
    let boxes: Vec<_> = samples.iter().map(|s| (s.id.clone(), s.bb)).collect();
    write_bbox_csv(dir.join(BBOX_FILE), &boxes, Some(config))?;
    let poses: Vec<_> = samples
        .iter()
        .filter_map(|s| s.pose.map(|p| (s.id.clone(), p)))
        .collect();
    if !poses.is_empty() {
        write_pose_csv(dir.join(POSE_INDEX_FILE), &poses, Some(config))?;
    }
    let path = dir.join(MANIFEST_FILE);
    write_manifest(
        &path,
        &Manifest {
            version: 1,
            config: config.clone(),
            samples: records,
        },
    )?;
    Ok(path)
}

// ---------------------------------------------------------------- annotation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub id: String,
    pub reason: String,
}

/// Fills `pose` from the landmarks of every sample. Samples without
/// landmarks or with degenerate ones keep their pose and are reported.
pub fn annotate_poses(samples: &mut [Sample], shape3d: &Shape3D) -> Vec<SkippedSample> {
    let mut skipped = Vec::new();
    for s in samples.iter_mut() {
        let result = match &s.landmarks {
            Some(shape) => fit_pose_from_landmarks(shape, shape3d).map(|f| f.pose),
            None => Err(Error::invalid("no landmarks")),
        };
        match result {
            Ok(pose) => s.pose = Some(pose),
            Err(e) => skipped.push(SkippedSample {
                id: s.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    skipped
}

// ---------------------------------------------------------------- splits

/// Seeded train/test split of `yaws.len()` items, stratified by yaw octile.
/// Returns sorted index lists.
pub fn split_indices(yaws: &[f64], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::invalid("train fraction must lie in [0, 1]"));
    }
    let n = yaws.len();
    let mut by_yaw: Vec<usize> = (0..n).collect();
    by_yaw.sort_by(|&a, &b| yaws[a].total_cmp(&yaws[b]).then(a.cmp(&b)));

    // Shuffle inside each octile, then take a systematic sample along the
    // octile-ordered list so each stratum keeps its share (within one item).
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ordered = Vec::with_capacity(n);
    for octile in 0..8 {
        let mut stratum: Vec<usize> = by_yaw[octile * n / 8..(octile + 1) * n / 8].to_vec();
        stratum.shuffle(&mut rng);
        ordered.extend(stratum);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, &idx) in ordered.iter().enumerate() {
        let take = ((i + 1) as f64 * train_fraction).round() > (i as f64 * train_fraction).round();
        if take {
            train.push(idx);
        } else {
            test.push(idx);
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Splits samples into `(train, test)`. Samples without a pose sort into
/// the middle octiles.
pub fn split(samples: Vec<Sample>, train_fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let yaws: Vec<f64> = samples.iter().map(|s| s.pose.map_or(0.0, |p| p.yaw)).collect();
    let (train_idx, _) = split_indices(&yaws, train_fraction, seed)?;
    let mut is_train = vec![false; samples.len()];
    for i in train_idx {
        is_train[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, t) in samples.into_iter().zip(is_train) {
        if t {
            train.push(s);
        } else {
            test.push(s);
        }
    }
    Ok((train, test))
}

// ---------------------------------------------------------------- synthesis

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseDistribution {
    Uniform,
    /// Centered on each range's midpoint with a standard deviation of a
    /// quarter of its width, truncated to the range.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub count: usize,
    pub pitch_range: [f64; 2],
    pub yaw_range: [f64; 2],
    pub roll_range: [f64; 2],
    pub distribution: PoseDistribution,
    pub image_size: usize,
    /// Width of the frontal face in pixels.
    pub face_width: f64,
    pub blob_sigma: f64,
    pub blob_amplitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Prefix of the generated sample ids.
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 2500,
            pitch_range: [-30.0, 30.0],
            yaw_range: [-60.0, 60.0],
            roll_range: [-30.0, 30.0],
            distribution: PoseDistribution::Uniform,
            image_size: 128,
            face_width: 80.0,
            blob_sigma: 2.0,
            blob_amplitude: 0.5,
            noise_sigma: 0.02,
            seed: 0,
            id_prefix: "synth".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        for (name, [lo, hi]) in [
            ("pitch", self.pitch_range),
            ("yaw", self.yaw_range),
            ("roll", self.roll_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && -90.0 <= lo && lo <= hi && hi <= 90.0) {
                return Err(Error::invalid(format!(
                    "{name} range [{lo}, {hi}] must be ordered and inside [-90, 90]"
                )));
            }
        }
        if self.image_size < 16 {
            return Err(Error::invalid("image size must be at least 16"));
        }
        let positive = [self.face_width, self.blob_sigma, self.blob_amplitude];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("face width, blob sigma and amplitude must be positive"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        Ok(())
    }

    fn draw_angle(&self, [lo, hi]: [f64; 2], rng: &mut impl Rng) -> f64 {
        if hi <= lo {
            return lo;
        }
        match self.distribution {
            PoseDistribution::Uniform => rng.gen_range(lo..=hi),
            PoseDistribution::Gaussian => {
                let normal = Normal::new(0.5 * (lo + hi), 0.25 * (hi - lo)).expect("positive spread");
                loop {
                    let v = normal.sample(rng);
                    if (lo..=hi).contains(&v) {
                        return v;
                    }
                }
            }
        }
    }
}

/// Renders blobs at the landmarks over a pose-dependent linear gradient,
/// adds Gaussian noise and clamps to `[0, 1]`.
pub fn render_face(
    landmarks: &Shape2D,
    pose: &HeadPose,
    cfg: &SynthConfig,
    rng: &mut impl Rng,
) -> Result<GrayImage> {
    let n = cfg.image_size;
    let half = n as f64 / 2.0;
    let (sy, sp) = (pose.yaw.to_radians().sin(), pose.pitch.to_radians().sin());
    let mut pixels = Vec::with_capacity(n * n);
    for j in 0..n {
        let v = (j as f64 + 0.5 - half) / half;
        for i in 0..n {
            let u = (i as f64 + 0.5 - half) / half;
            pixels.push(0.3 + 0.1 * (sy * u + sp * v));
        }
    }

    let sigma = cfg.blob_sigma;
    let reach = 5.0 * sigma;
    let inv = 1.0 / (2.0 * sigma * sigma);
    // pixel centers within `reach` of the landmark along each axis
    let span = |c: f64| {
        let lo = (c - 0.5 - reach).ceil().max(0.0) as usize;
        let hi = (c - 0.5 + reach).floor().min(n as f64 - 1.0);
        lo..(hi + 1.0).max(0.0) as usize
    };
    for p in landmarks.points() {
        for j in span(p.y) {
            let dy = j as f64 + 0.5 - p.y;
            for i in span(p.x) {
                let dx = i as f64 + 0.5 - p.x;
                pixels[j * n + i] +=
                    cfg.blob_amplitude * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }

    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("non-negative sigma");
        for v in &mut pixels {
            *v += noise.sample(rng);
        }
    }
    for v in &mut pixels {
        *v = v.clamp(0.0, 1.0);
    }
    GrayImage::new(n, n, pixels)
}

/// Generates one sample. Each index has its own random stream, so any
/// subset can be regenerated independently.
pub fn generate_sample(cfg: &SynthConfig, shape3d: &Shape3D, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let pose = HeadPose::new(
        cfg.draw_angle(cfg.pitch_range, &mut rng),
        cfg.draw_angle(cfg.yaw_range, &mut rng),
        cfg.draw_angle(cfg.roll_range, &mut rng),
    )?;
    let half = cfg.image_size as f64 / 2.0;
    let canonical = BoundingBox::from_center(Point2::new(half, half), cfg.face_width, cfg.face_width)?;
    let landmarks = project_weak_perspective(shape3d, &pose, &canonical)?;
    let image = render_face(&landmarks, &pose, cfg, &mut rng)?;
    let fitted = fit_pose_from_landmarks(&landmarks, shape3d)?.pose;
    Ok(Sample {
        id: format!("{}_{index:05}", cfg.id_prefix),
        image,
        bb: landmark_box(&landmarks)?,
        landmarks: Some(landmarks),
        pose: Some(fitted),
    })
}

pub fn generate_synthetic(cfg: &SynthConfig, shape3d: &Shape3D) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..cfg.count).map(|i| generate_sample(cfg, shape3d, i)).collect()
}

/// Lookup from sample id to position, for joining CSV rows onto samples.
pub fn index_by_id(samples: &[Sample]) -> BTreeMap<&str, usize> {
    samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect()
}
