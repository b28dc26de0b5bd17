//! Initial shapes for the cascade: mean shape, random exemplars, projection
//! of the 3D mean face under a head pose, and pose-space nearest neighbours.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, DEFAULT_BOX_DILATION};
use crate::error::{Error, Result};
use crate::geometry::{
    apply_similarity, project_weak_perspective, similarity_between_boxes, BoundingBox, HeadPose,
    Shape2D, Shape3D,
};

/// A training shape with its box and landmark-fitted pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainExemplar {
    pub id: String,
    pub shape: Shape2D,
    pub bb: BoundingBox,
    pub pose: HeadPose,
}

impl TrainExemplar {
    /// Requires both landmarks and pose on the sample.
    pub fn from_sample(s: &Sample) -> Result<TrainExemplar> {
        match (&s.landmarks, s.pose) {
            (Some(shape), Some(pose)) => Ok(TrainExemplar {
                id: s.id.clone(),
                shape: shape.clone(),
                bb: s.bb,
                pose,
            }),
            _ => Err(Error::invalid(format!(
                "sample {} needs landmarks and a pose to serve as an exemplar",
                s.id
            ))),
        }
    }
}

/// Initialization rule. Text form: `mean`, `random:<n>`, `3d`, `knn:<k>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InitScheme {
    Mean,
    Random { n: usize },
    Projection3d,
    Knn { k: usize },
}

impl InitScheme {
    pub fn init_count(&self) -> usize {
        match *self {
            InitScheme::Mean | InitScheme::Projection3d => 1,
            InitScheme::Random { n } => n,
            InitScheme::Knn { k } => k,
        }
    }

    /// Whether the scheme consumes a head pose estimate.
    pub fn needs_pose(&self) -> bool {
        matches!(self, InitScheme::Projection3d | InitScheme::Knn { .. })
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitScheme::Mean => write!(f, "mean"),
            InitScheme::Random { n } => write!(f, "random:{n}"),
            InitScheme::Projection3d => write!(f, "3d"),
            InitScheme::Knn { k } => write!(f, "knn:{k}"),
        }
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let count = |v: &str| -> Result<usize> {
            match v.parse::<usize>() {
                Ok(n) if n >= 1 => Ok(n),
                _ => Err(Error::invalid(format!("scheme '{s}' needs a count >= 1"))),
            }
        };
        match s.split_once(':') {
            None if s == "mean" => Ok(InitScheme::Mean),
            None if s == "3d" => Ok(InitScheme::Projection3d),
            Some(("random", n)) => Ok(InitScheme::Random { n: count(n)? }),
            Some(("knn", k)) => Ok(InitScheme::Knn { k: count(k)? }),
            _ => Err(Error::invalid(format!(
                "unknown scheme '{s}' (expected mean, random:<n>, 3d or knn:<k>)"
            ))),
        }
    }
}

impl Serialize for InitScheme {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for InitScheme {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitSet {
    pub scheme: InitScheme,
    pub shapes: Vec<Shape2D>,
    /// Exemplar ids the shapes came from; empty for model-based schemes.
    pub source_ids: Vec<String>,
}

fn unit_box() -> BoundingBox {
    BoundingBox {
        x: 0.0,
        y: 0.0,
        w: 1.0,
        h: 1.0,
    }
}

/// Maps a shape from its source box into `bb`.
pub fn transfer(shape: &Shape2D, src: &BoundingBox, bb: &BoundingBox) -> Shape2D {
    apply_similarity(&similarity_between_boxes(src, bb), shape)
}

fn check_exemplars(exemplars: &[TrainExemplar]) -> Result<usize> {
    let k = exemplars
        .first()
        .ok_or_else(|| Error::invalid("at least one exemplar is required"))?
        .shape
        .len();
    if let Some(e) = exemplars.iter().find(|e| e.shape.len() != k) {
        return Err(Error::mismatch(
            format!("{k} landmarks"),
            format!("{} landmarks in exemplar {}", e.shape.len(), e.id),
        ));
    }
    Ok(k)
}

/// Mean of the exemplar shapes in the unit-box frame.
pub fn normalized_mean_shape(exemplars: &[TrainExemplar]) -> Result<Shape2D> {
    let k = check_exemplars(exemplars)?;
    let mut acc = vec![0.0; 2 * k];
    for e in exemplars {
        let unit = transfer(&e.shape, &e.bb, &unit_box());
        for (a, v) in acc.iter_mut().zip(unit.to_flat()) {
            *a += v;
        }
    }
    let n = exemplars.len() as f64;
    Shape2D::from_flat(&acc.iter().map(|a| a / n).collect::<Vec<_>>())
}

/// Places a unit-box-frame shape into `bb`.
pub fn place_normalized(shape: &Shape2D, bb: &BoundingBox) -> Shape2D {
    transfer(shape, &unit_box(), bb)
}

pub fn mean_shape_init(exemplars: &[TrainExemplar], bb: &BoundingBox) -> Result<Shape2D> {
    Ok(place_normalized(&normalized_mean_shape(exemplars)?, bb))
}

/// `n` distinct indices below `len` (with replacement once `n > len`).
pub fn random_indices(len: usize, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n <= len {
        index::sample(rng, len, n).into_vec()
    } else {
        (0..n).map(|_| rng.gen_range(0..len)).collect()
    }
}

pub fn random_init(
    exemplars: &[TrainExemplar],
    bb: &BoundingBox,
    n: usize,
    seed: u64,
) -> Result<InitSet> {
    check_exemplars(exemplars)?;
    if n == 0 {
        return Err(Error::invalid("random init needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = random_indices(exemplars.len(), n, &mut rng);
    Ok(InitSet {
        scheme: InitScheme::Random { n },
        shapes: picks
            .iter()
            .map(|&i| transfer(&exemplars[i].shape, &exemplars[i].bb, bb))
            .collect(),
        source_ids: picks.iter().map(|&i| exemplars[i].id.clone()).collect(),
    })
}

/// Projects the mean 3D face under `pose` and fits it into `bb`.
///
/// The projection is framed by its own tight box dilated by the same
/// fraction used for dataset boxes, and that frame is mapped onto `bb`, so
/// a shape lands where the face it describes would. Pass `None` to use the
/// raw projection instead (frontal width equal to `bb.w`, centroid on the
/// box center).
pub fn scheme1_3d_init_with(
    pose: &HeadPose,
    bb: &BoundingBox,
    shape3d: &Shape3D,
    box_dilation: Option<f64>,
) -> Result<Shape2D> {
    let Some(dilation) = box_dilation else {
        return project_weak_perspective(shape3d, pose, bb);
    };
    bb.validate()?;
    let canonical = project_weak_perspective(shape3d, pose, &unit_box())?;
    let frame = BoundingBox::tight(&canonical)?.dilated(dilation)?;
    Ok(transfer(&canonical, &frame, bb))
}

pub fn scheme1_3d_init(pose: &HeadPose, bb: &BoundingBox, shape3d: &Shape3D) -> Result<Shape2D> {
    scheme1_3d_init_with(pose, bb, shape3d, Some(DEFAULT_BOX_DILATION))
}

/// Per-axis weights of the pose distance; unit weights give the plain
/// Euclidean distance in degrees.
pub type PoseWeights = [f64; 3];

pub const UNIT_WEIGHTS: PoseWeights = [1.0, 1.0, 1.0];

fn weighted_distance2(a: &HeadPose, b: &HeadPose, w: &PoseWeights) -> f64 {
    let (a, b) = (a.as_array(), b.as_array());
    (0..3).map(|i| w[i] * (a[i] - b[i]).powi(2)).sum()
}

/// Indices of the `k` exemplars nearest to `query`, nearest first; equal
/// distances go to the smaller id.
pub fn knn_indices(
    query: &HeadPose,
    exemplars: &[TrainExemplar],
    k: usize,
    weights: &PoseWeights,
) -> Result<Vec<usize>> {
    if k == 0 || k > exemplars.len() {
        return Err(Error::invalid(format!(
            "k = {k} must lie in 1..={}",
            exemplars.len()
        )));
    }
    let dist: Vec<f64> = exemplars
        .iter()
        .map(|e| weighted_distance2(query, &e.pose, weights))
        .collect();
    let order = |&a: &usize, &b: &usize| {
        dist[a]
            .total_cmp(&dist[b])
            .then_with(|| exemplars[a].id.cmp(&exemplars[b].id))
            .then(a.cmp(&b))
    };
    let mut idx: Vec<usize> = (0..exemplars.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    Ok(idx)
}

pub fn scheme2_knn_init_weighted(
    pose: &HeadPose,
    bb: &BoundingBox,
    exemplars: &[TrainExemplar],
    k: usize,
    weights: &PoseWeights,
) -> Result<InitSet> {
    check_exemplars(exemplars)?;
    let picks = knn_indices(pose, exemplars, k, weights)?;
    Ok(InitSet {
        scheme: InitScheme::Knn { k },
        shapes: picks
            .iter()
            .map(|&i| transfer(&exemplars[i].shape, &exemplars[i].bb, bb))
            .collect(),
        source_ids: picks.iter().map(|&i| exemplars[i].id.clone()).collect(),
    })
}

pub fn scheme2_knn_init(
    pose: &HeadPose,
    bb: &BoundingBox,
    exemplars: &[TrainExemplar],
    k: usize,
) -> Result<InitSet> {
    scheme2_knn_init_weighted(pose, bb, exemplars, k, &UNIT_WEIGHTS)
}

/// Median of a slice, averaging the two middle values for even lengths.
/// Reorders `values`.
pub(crate) fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Independent per-coordinate median of the shapes.
pub fn aggregate_median(predictions: &[Shape2D]) -> Result<Shape2D> {
    let first = predictions
        .first()
        .ok_or_else(|| Error::invalid("median of zero shapes"))?;
    if predictions.len() == 1 {
        return Ok(first.clone());
    }
    let k = first.len();
    if let Some(p) = predictions.iter().find(|p| p.len() != k) {
        return Err(Error::mismatch(format!("{k} landmarks"), format!("{} landmarks", p.len())));
    }
    let flats: Vec<Vec<f64>> = predictions.iter().map(Shape2D::to_flat).collect();
    let mut column = vec![0.0; flats.len()];
    let mut out = Vec::with_capacity(2 * k);
    for c in 0..2 * k {
        for (v, f) in column.iter_mut().zip(&flats) {
            *v = f[c];
        }
        out.push(median_in_place(&mut column));
    }
    Shape2D::from_flat(&out)
}
