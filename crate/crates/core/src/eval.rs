//! Alignment metrics, failure analysis, and initialization-scheme
//! comparisons.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cascade::{run_cascade_shapes, CascadeModel};
use crate::data::{csv_writer, SkippedSample};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, HeadPose, Shape2D, Shape3D};
use crate::gray::GrayImage;
use crate::init::{
    aggregate_median, mean_shape_init, random_init, scheme1_3d_init, scheme2_knn_init, InitScheme,
    TrainExemplar,
};
use crate::pose_net::PoseNet;

/// Outer eye corners in the 68-point markup (0-based; 37 and 46 one-based).
pub const OUTER_EYE_CORNERS_68: (usize, usize) = (36, 45);
pub const DEFAULT_FAILURE_THRESHOLD: f64 = 0.1;
/// Width of the max-|angle| histogram buckets, in degrees.
pub const HISTOGRAM_BUCKET_DEG: f64 = 15.0;

pub fn inter_ocular_indices(k: usize) -> Option<(usize, usize)> {
    (k == 68).then_some(OUTER_EYE_CORNERS_68)
}

/// Mean point-to-point error divided by the distance between landmarks
/// `normalizer.0` and `normalizer.1` of the ground truth.
pub fn normalized_error_with(pred: &Shape2D, gt: &Shape2D, normalizer: (usize, usize)) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::mismatch(
            format!("{} landmarks", gt.len()),
            format!("{} landmarks", pred.len()),
        ));
    }
    let (a, b) = normalizer;
    if a >= gt.len() || b >= gt.len() {
        return Err(Error::invalid(format!(
            "normalizer landmarks ({a}, {b}) out of range for {} points",
            gt.len()
        )));
    }
    let d = (gt.point(a) - gt.point(b)).norm();
    if !(d > 0.0) {
        return Err(Error::ZeroNormalizer);
    }
    let total: f64 = pred
        .points()
        .iter()
        .zip(gt.points())
        .map(|(p, q)| (p - q).norm())
        .sum();
    Ok(total / gt.len() as f64 / d)
}

/// Inter-ocular normalized error for 68-point shapes.
pub fn normalized_error(pred: &Shape2D, gt: &Shape2D) -> Result<f64> {
    normalized_error_with(pred, gt, OUTER_EYE_CORNERS_68)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub id: String,
    pub predicted: Shape2D,
    pub ground_truth: Shape2D,
    pub error: f64,
}

impl AlignmentResult {
    pub fn new(id: impl Into<String>, predicted: Shape2D, ground_truth: Shape2D) -> Result<Self> {
        let error = normalized_error(&predicted, &ground_truth)?;
        Ok(Self {
            id: id.into(),
            predicted,
            ground_truth,
            error,
        })
    }
}

/// Count and fraction of errors strictly above `threshold`.
pub fn failure_rate(errors: &[f64], threshold: f64) -> (usize, f64) {
    let count = errors.iter().filter(|&&e| e > threshold).count();
    let rate = if errors.is_empty() {
        0.0
    } else {
        count as f64 / errors.len() as f64
    };
    (count, rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CedPoint {
    pub threshold: f64,
    /// Fraction of samples with error <= threshold.
    pub fraction: f64,
}

pub fn ced_curve(errors: &[f64], thresholds: &[f64]) -> Vec<CedPoint> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    thresholds
        .iter()
        .map(|&t| CedPoint {
            threshold: t,
            fraction: if sorted.is_empty() {
                0.0
            } else {
                sorted.partition_point(|&e| e <= t) as f64 / sorted.len() as f64
            },
        })
        .collect()
}

/// `n + 1` evenly spaced thresholds from 0 to `max`.
pub fn linear_thresholds(max: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| max * i as f64 / n as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosedError {
    pub id: String,
    pub error: f64,
    pub pose: HeadPose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBucket {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopErrorAnalysis {
    /// Largest errors first; equal errors in ascending id order.
    pub selected: Vec<PosedError>,
    /// Max-|angle| histogram of the selected samples.
    pub histogram: Vec<HistogramBucket>,
}

/// Index of the histogram bucket holding `angle` (degrees in `[0, 90]`).
pub fn max_angle_bucket(angle: f64) -> usize {
    let last = (90.0 / HISTOGRAM_BUCKET_DEG).ceil() as usize - 1;
    ((angle / HISTOGRAM_BUCKET_DEG).floor().max(0.0) as usize).min(last)
}

pub fn max_angle_histogram(poses: impl IntoIterator<Item = HeadPose>) -> Vec<HistogramBucket> {
    let buckets = (90.0 / HISTOGRAM_BUCKET_DEG).ceil() as usize;
    let mut hist: Vec<HistogramBucket> = (0..buckets)
        .map(|i| HistogramBucket {
            lo: i as f64 * HISTOGRAM_BUCKET_DEG,
            hi: ((i + 1) as f64 * HISTOGRAM_BUCKET_DEG).min(90.0),
            count: 0,
        })
        .collect();
    for p in poses {
        hist[max_angle_bucket(p.max_abs_angle())].count += 1;
    }
    hist
}

/// The `n` largest-error samples and the distribution of their largest
/// absolute rotation angle.
pub fn top_error_pose_analysis(results: &[PosedError], n: usize) -> Result<TopErrorAnalysis> {
    if n > results.len() {
        return Err(Error::invalid(format!(
            "asked for {n} samples out of {}",
            results.len()
        )));
    }
    let mut sorted: Vec<&PosedError> = results.iter().collect();
    sorted.sort_by(|a, b| b.error.total_cmp(&a.error).then_with(|| a.id.cmp(&b.id)));
    let selected: Vec<PosedError> = sorted[..n].iter().map(|&r| r.clone()).collect();
    let histogram = max_angle_histogram(selected.iter().map(|r| r.pose));
    Ok(TopErrorAnalysis { selected, histogram })
}

// ---------------------------------------------------------------- comparisons

/// Where the head pose consumed by pose-based schemes comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseSource {
    /// The trained pose network applied to the image.
    Net,
    /// The pose fitted to the ground-truth landmarks.
    Solver,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeSpec {
    pub scheme: InitScheme,
    pub pose_source: PoseSource,
    /// Seeds the per-sample random initializations.
    pub seed: u64,
}

impl SchemeSpec {
    pub fn label(&self) -> String {
        if self.scheme.needs_pose() {
            let src = match self.pose_source {
                PoseSource::Net => "net",
                PoseSource::Solver => "solver",
            };
            format!("{}@{src}", self.scheme)
        } else {
            format!("{}#{}", self.scheme, self.seed)
        }
    }
}

/// A test sample with ground truth.
#[derive(Debug, Clone, Copy)]
pub struct EvalSample<'a> {
    pub id: &'a str,
    pub image: &'a GrayImage,
    pub bb: BoundingBox,
    pub landmarks: &'a Shape2D,
    /// Pose fitted to the ground-truth landmarks.
    pub pose: Option<HeadPose>,
}

impl<'a> EvalSample<'a> {
    /// Samples without landmarks cannot be evaluated and are skipped.
    pub fn from_samples(samples: &'a [crate::data::Sample]) -> Vec<EvalSample<'a>> {
        samples
            .iter()
            .filter_map(|s| {
                s.landmarks.as_ref().map(|l| EvalSample {
                    id: &s.id,
                    image: &s.image,
                    bb: s.bb,
                    landmarks: l,
                    pose: s.pose,
                })
            })
            .collect()
    }
}

/// Everything the schemes and the cascade need at test time.
pub struct Pipeline<'a> {
    pub cascade: &'a CascadeModel,
    pub pose_net: Option<&'a PoseNet>,
    pub exemplars: &'a [TrainExemplar],
    pub shape3d: &'a Shape3D,
}

/// Seed for the random initialization of sample `index`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.next_u64()
}

impl Pipeline<'_> {
    pub fn net_pose(&self, image: &GrayImage, bb: &BoundingBox) -> Result<HeadPose> {
        self.pose_net
            .ok_or_else(|| Error::invalid("pose source 'net' needs a pose network"))?
            .predict_pose(image, bb)
    }

    pub fn estimate_pose(&self, sample: &EvalSample, source: PoseSource) -> Result<HeadPose> {
        match source {
            PoseSource::Net => self.net_pose(sample.image, &sample.bb),
            PoseSource::Solver => sample
                .pose
                .ok_or_else(|| Error::invalid(format!("sample {} has no pose", sample.id))),
        }
    }

    /// Initial shapes for one image. `pose` is required by pose-based schemes.
    pub fn initial_shapes(
        &self,
        scheme: InitScheme,
        bb: &BoundingBox,
        pose: Option<&HeadPose>,
        seed: u64,
    ) -> Result<Vec<Shape2D>> {
        let need = || pose.ok_or_else(|| Error::invalid(format!("scheme {scheme} needs a head pose")));
        Ok(match scheme {
            InitScheme::Mean => vec![mean_shape_init(self.exemplars, bb)?],
            InitScheme::Random { n } => random_init(self.exemplars, bb, n, seed)?.shapes,
            InitScheme::Projection3d => vec![scheme1_3d_init(need()?, bb, self.shape3d)?],
            InitScheme::Knn { k } => scheme2_knn_init(need()?, bb, self.exemplars, k)?.shapes,
        })
    }

    /// Initializes and aligns one sample.
    pub fn align(
        &self,
        image: &GrayImage,
        bb: &BoundingBox,
        scheme: InitScheme,
        pose: Option<&HeadPose>,
        seed: u64,
    ) -> Result<(Vec<Shape2D>, Shape2D)> {
        let inits = self.initial_shapes(scheme, bb, pose, seed)?;
        let out = run_cascade_shapes(self.cascade, image, bb, &inits)?;
        Ok((inits, out))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub error: f64,
    /// Error of the initialization (median shape when there are several).
    pub init_error: f64,
    /// Ground-truth pose, when known.
    pub pose: Option<HeadPose>,
    /// Pose handed to the scheme, when it uses one.
    pub estimated_pose: Option<HeadPose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseBucketError {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub spec: SchemeSpec,
    pub threshold: f64,
    pub records: Vec<SampleRecord>,
    pub mean_error: f64,
    pub mean_init_error: f64,
    pub failures: usize,
    pub failure_rate: f64,
    pub ced: Vec<CedPoint>,
    /// Errors grouped by the largest absolute ground-truth angle.
    pub pose_buckets: Vec<PoseBucketError>,
    pub skipped: Vec<SkippedSample>,
}

impl EvalReport {
    pub fn from_records(
        spec: SchemeSpec,
        threshold: f64,
        records: Vec<SampleRecord>,
        skipped: Vec<SkippedSample>,
    ) -> EvalReport {
        let errors: Vec<f64> = records.iter().map(|r| r.error).collect();
        let mean = |v: &mut dyn Iterator<Item = f64>| {
            let (s, n) = v.fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));
            if n == 0 {
                f64::NAN
            } else {
                s / n as f64
            }
        };
        let (failures, failure_rate) = failure_rate(&errors, threshold);
        let max = errors.iter().copied().fold(3.0 * threshold, f64::max);
        let mut pose_buckets: Vec<PoseBucketError> = max_angle_histogram([])
            .into_iter()
            .map(|b| PoseBucketError {
                lo: b.lo,
                hi: b.hi,
                count: 0,
                mean_error: None,
            })
            .collect();
        let mut sums = vec![0.0; pose_buckets.len()];
        for r in &records {
            if let Some(p) = r.pose {
                let b = max_angle_bucket(p.max_abs_angle());
                pose_buckets[b].count += 1;
                sums[b] += r.error;
            }
        }
        for (b, s) in pose_buckets.iter_mut().zip(sums) {
            b.mean_error = (b.count > 0).then(|| s / b.count as f64);
        }
        EvalReport {
            label: spec.label(),
            spec,
            threshold,
            mean_error: mean(&mut errors.iter().copied()),
            mean_init_error: mean(&mut records.iter().map(|r| r.init_error)),
            failures,
            failure_rate,
            ced: ced_curve(&errors, &linear_thresholds(max, 100)),
            pose_buckets,
            records,
            skipped,
        }
    }
}

/// Runs one scheme over the samples. Per-sample failures are reported in
/// the skip list.
pub fn evaluate_scheme(
    pipeline: &Pipeline,
    samples: &[EvalSample],
    spec: &SchemeSpec,
    threshold: f64,
) -> EvalReport {
    let mut records = Vec::with_capacity(samples.len());
    let mut skipped = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let run = || -> Result<SampleRecord> {
            let estimated_pose = if spec.scheme.needs_pose() {
                Some(pipeline.estimate_pose(s, spec.pose_source)?)
            } else {
                None
            };
            let (inits, out) = pipeline.align(
                s.image,
                &s.bb,
                spec.scheme,
                estimated_pose.as_ref(),
                sample_seed(spec.seed, i),
            )?;
            Ok(SampleRecord {
                id: s.id.to_string(),
                error: normalized_error(&out, s.landmarks)?,
                init_error: normalized_error(&aggregate_median(&inits)?, s.landmarks)?,
                pose: s.pose,
                estimated_pose,
            })
        };
        match run() {
            Ok(r) => records.push(r),
            Err(e) => skipped.push(SkippedSample {
                id: s.id.to_string(),
                reason: e.to_string(),
            }),
        }
    }
    EvalReport::from_records(*spec, threshold, records, skipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub label: String,
    pub baseline: String,
    /// Mean of `error - baseline error` over samples present in both.
    pub mean_delta: f64,
    pub failure_delta: i64,
    /// Samples where this scheme's error is strictly lower.
    pub wins: usize,
    pub paired: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub reports: Vec<EvalReport>,
    /// Every report against the first one.
    pub deltas: Vec<PairedDelta>,
}

pub fn paired_delta(report: &EvalReport, baseline: &EvalReport) -> PairedDelta {
    let base: std::collections::HashMap<&str, f64> =
        baseline.records.iter().map(|r| (r.id.as_str(), r.error)).collect();
    let (mut sum, mut wins, mut paired) = (0.0, 0, 0);
    for r in &report.records {
        if let Some(&b) = base.get(r.id.as_str()) {
            sum += r.error - b;
            wins += usize::from(r.error < b);
            paired += 1;
        }
    }
    PairedDelta {
        label: report.label.clone(),
        baseline: baseline.label.clone(),
        mean_delta: if paired > 0 { sum / paired as f64 } else { f64::NAN },
        failure_delta: report.failures as i64 - baseline.failures as i64,
        wins,
        paired,
    }
}

/// Evaluates every scheme on the same samples and seeds.
pub fn compare_schemes(
    pipeline: &Pipeline,
    samples: &[EvalSample],
    specs: &[SchemeSpec],
    threshold: f64,
) -> ComparisonReport {
    let reports: Vec<EvalReport> = specs
        .iter()
        .map(|spec| evaluate_scheme(pipeline, samples, spec, threshold))
        .collect();
    let deltas = match reports.first() {
        Some(base) => reports.iter().map(|r| paired_delta(r, base)).collect(),
        None => Vec::new(),
    };
    ComparisonReport { reports, deltas }
}

// ---------------------------------------------------------------- report files

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Minimal line/bar chart as SVG. `series` are `(label, points)`.
pub fn svg_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)], bars: bool) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const PAD: f64 = 60.0;
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"];
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x_max, mut y_max) = (0.0f64, 0.0f64);
    for &(x, y) in pts {
        x_max = x_max.max(x);
        y_max = y_max.max(y);
    }
    let x_max = if x_max > 0.0 { x_max } else { 1.0 };
    let y_max = if y_max > 0.0 { y_max } else { 1.0 };
    let sx = |x: f64| PAD + x / x_max * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - y / y_max * (H - 2.0 * PAD);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
    let _ = writeln!(svg, r#"<line x1="{PAD}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, H - PAD, W - PAD);
    let _ = writeln!(svg, r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#, H - PAD);
    for i in 0..=4 {
        let (xv, yv) = (x_max * i as f64 / 4.0, y_max * i as f64 / 4.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.3}</text>"#, sx(xv), H - PAD + 16.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#, PAD - 6.0, sy(yv) + 4.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, W / 2.0, H - 16.0);
    let _ = writeln!(svg, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {0})">{y_label}</text>"#, H / 2.0);
    for (i, (label, points)) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        if bars {
            let width = (W - 2.0 * PAD) / points.len().max(1) as f64 * 0.8;
            for &(x, y) in points {
                let _ = writeln!(svg, r#"<rect x="{:.1}" y="{:.1}" width="{width:.1}" height="{:.1}" fill="{color}"/>"#, sx(x) - width / 2.0, sy(y), sy(0.0) - sy(y));
            }
        } else {
            let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        }
        let _ = writeln!(svg, r#"<text x="{}" y="{}" fill="{color}">{label}</text>"#, W - PAD - 150.0, PAD + 16.0 * i as f64);
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `<stem>.json`, `<stem>.csv` (per sample per scheme),
/// `<stem>_ced.svg` and `<stem>_hist.svg`. Each file carries `config`.
pub fn write_comparison(dir: &Path, stem: &str, report: &ComparisonReport, config: &Value) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join(format!("{stem}.json"));
    let body = serde_json::json!({ "config": config, "comparison": report });
    write_text(&json_path, &(serde_json::to_string_pretty(&body)? + "\n"))?;

    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = csv_writer(&csv_path, Some(config))?;
    w.write_record(["scheme", "id", "error", "init_error", "pitch", "yaw", "roll", "est_pitch", "est_yaw", "est_roll"])?;
    for rep in &report.reports {
        for r in &rep.records {
            let angles = |p: Option<HeadPose>| match p {
                Some(p) => p.as_array().map(|v| v.to_string()),
                None => [String::new(), String::new(), String::new()],
            };
            let [p, y, ro] = angles(r.pose);
            let [ep, ey, er] = angles(r.estimated_pose);
            w.write_record([rep.label.clone(), r.id.clone(), r.error.to_string(), r.init_error.to_string(), p, y, ro, ep, ey, er])?;
        }
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let comment = format!("<!-- {} -->\n", serde_json::to_string(config)?.replace("--", "- -"));
    let ced: Vec<(String, Vec<(f64, f64)>)> = report
        .reports
        .iter()
        .map(|r| (r.label.clone(), r.ced.iter().map(|c| (c.threshold, c.fraction)).collect()))
        .collect();
    let ced_path = dir.join(format!("{stem}_ced.svg"));
    write_text(&ced_path, &(comment.clone() + &svg_chart("Cumulative error distribution", "normalized error", "fraction of samples", &ced, false)))?;

    let hist: Vec<(String, Vec<(f64, f64)>)> = report
        .reports
        .iter()
        .map(|r| {
            let failed: Vec<HeadPose> = r.records.iter().filter(|x| x.error > r.threshold).filter_map(|x| x.pose).collect();
            let h = max_angle_histogram(failed);
            (r.label.clone(), h.iter().map(|b| (0.5 * (b.lo + b.hi), b.count as f64)).collect())
        })
        .take(1)
        .collect();
    let hist_path = dir.join(format!("{stem}_hist.svg"));
    write_text(&hist_path, &(comment + &svg_chart("Failures by largest absolute angle", "max |angle| (deg)", "failures", &hist, true)))?;
    Ok(vec![json_path, csv_path, ced_path, hist_path])
}
