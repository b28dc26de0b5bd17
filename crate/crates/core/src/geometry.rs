//! Shapes, poses, boxes and the transforms between them.
//!
//! Image coordinates throughout: x grows to the right, y grows downward, and
//! the depth axis of the 3D model points away from the camera (right-handed).

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, Point2, Point3, Rotation2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of landmarks in the 68-point markup used by the canonical 3D shape.
pub const NUM_LANDMARKS_68: usize = 68;

const CANONICAL_SHAPE_3D: &str = include_str!("../data/mean_face_68.txt");

/// A 2D landmark shape of `K` points in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct Shape2D {
    points: Vec<Point2<f64>>,
}

impl Shape2D {
    pub fn new(points: Vec<Point2<f64>>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid(format!(
                "a shape needs at least 2 landmarks, got {}",
                points.len()
            )));
        }
        if let Some(k) = points.iter().position(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(Error::invalid(format!("landmark {k} is not finite")));
        }
        Ok(Self { points })
    }

    /// Builds a shape from an interleaved `[x0, y0, x1, y1, ...]` slice.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(2) {
            return Err(Error::invalid("flattened shape has odd length"));
        }
        Self::new(flat.chunks_exact(2).map(|c| Point2::new(c[0], c[1])).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point2<f64>] {
        &self.points
    }

    pub fn point(&self, k: usize) -> Point2<f64> {
        self.points[k]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn centroid(&self) -> Point2<f64> {
        let sum = self
            .points
            .iter()
            .fold(Vector2::zeros(), |acc, p| acc + p.coords);
        Point2::from(sum / self.points.len() as f64)
    }

    pub fn translated(&self, offset: Vector2<f64>) -> Shape2D {
        Shape2D {
            points: self.points.iter().map(|p| p + offset).collect(),
        }
    }

    /// Returns `(min, max)` corners of the axis-aligned extent.
    pub fn extent(&self) -> (Point2<f64>, Point2<f64>) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points[1..] {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }
}

impl TryFrom<Vec<[f64; 2]>> for Shape2D {
    type Error = Error;

    fn try_from(value: Vec<[f64; 2]>) -> Result<Self> {
        Shape2D::new(value.into_iter().map(|[x, y]| Point2::new(x, y)).collect())
    }
}

impl From<Shape2D> for Vec<[f64; 2]> {
    fn from(shape: Shape2D) -> Self {
        shape.points.into_iter().map(|p| [p.x, p.y]).collect()
    }
}

/// Canonical mean 3D face: 68 landmarks, centered on the centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape3D {
    points: Vec<Point3<f64>>,
}

impl Shape3D {
    /// The mean face shipped with the crate.
    pub fn canonical() -> Shape3D {
        Self::parse(CANONICAL_SHAPE_3D).expect("bundled mean face is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Shape3D> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses one `x y z` triple per line and re-centers on the centroid.
    pub fn parse(text: &str) -> Result<Shape3D> {
        let mut points = Vec::with_capacity(NUM_LANDMARKS_68);
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let coords: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: "<shape3d>".into(),
                    line: i + 1,
                    message: format!("{e}"),
                })?;
            if coords.len() != 3 || coords.iter().any(|c| !c.is_finite()) {
                return Err(Error::Parse {
                    path: "<shape3d>".into(),
                    line: i + 1,
                    message: "expected three finite numbers".into(),
                });
            }
            points.push(Point3::new(coords[0], coords[1], coords[2]));
        }
        Self::new(points)
    }

    pub fn new(mut points: Vec<Point3<f64>>) -> Result<Shape3D> {
        if points.len() != NUM_LANDMARKS_68 {
            return Err(Error::CountMismatch {
                declared: NUM_LANDMARKS_68,
                actual: points.len(),
            });
        }
        let centroid = points
            .iter()
            .fold(nalgebra::Vector3::zeros(), |acc, p| acc + p.coords)
            / points.len() as f64;
        for p in &mut points {
            p.coords -= centroid;
        }
        let mut scatter = Matrix3::zeros();
        for p in &points {
            scatter += p.coords * p.coords.transpose();
        }
        let sv = scatter.symmetric_eigenvalues();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        if sv[0] <= 0.0 || sv[1] <= 1e-12 * sv[0] {
            return Err(Error::DegenerateInput(
                "3D shape points are collinear".into(),
            ));
        }
        Ok(Shape3D { points })
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Width of the frontal (identity-pose) orthographic projection.
    pub fn frontal_width(&self) -> f64 {
        let (lo, hi) = self
            .points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.x), hi.max(p.x))
            });
        hi - lo
    }
}

/// Head orientation in degrees. Every angle lies in `[-90, 90]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadPose {
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
}

impl HeadPose {
    pub const LIMIT_DEG: f64 = 90.0;

    pub fn new(pitch: f64, yaw: f64, roll: f64) -> Result<HeadPose> {
        let pose = HeadPose { pitch, yaw, roll };
        pose.validate()?;
        Ok(pose)
    }

    pub fn frontal() -> HeadPose {
        HeadPose {
            pitch: 0.0,
            yaw: 0.0,
            roll: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("pitch", self.pitch), ("yaw", self.yaw), ("roll", self.roll)] {
            if !v.is_finite() || v.abs() > Self::LIMIT_DEG {
                return Err(Error::invalid(format!(
                    "{name} = {v} is outside [-90, 90] degrees"
                )));
            }
        }
        Ok(())
    }

    /// Builds a pose by clamping each angle into `[-90, 90]`.
    pub fn clamped(pitch: f64, yaw: f64, roll: f64) -> HeadPose {
        let c = |v: f64| v.clamp(-Self::LIMIT_DEG, Self::LIMIT_DEG);
        HeadPose {
            pitch: c(pitch),
            yaw: c(yaw),
            roll: c(roll),
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.pitch, self.yaw, self.roll]
    }

    /// Largest absolute angle among the three axes.
    pub fn max_abs_angle(&self) -> f64 {
        self.pitch.abs().max(self.yaw.abs()).max(self.roll.abs())
    }

    /// Euclidean distance in degree space.
    pub fn distance(&self, other: &HeadPose) -> f64 {
        let d = [
            self.pitch - other.pitch,
            self.yaw - other.yaw,
            self.roll - other.roll,
        ];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }
}

impl fmt::Display for HeadPose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(pitch {:.3}, yaw {:.3}, roll {:.3})",
            self.pitch, self.yaw, self.roll
        )
    }
}

/// Axis-aligned box with top-left corner `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<BoundingBox> {
        let bb = BoundingBox { x, y, w, h };
        bb.validate()?;
        Ok(bb)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::invalid(format!("invalid bounding box {self:?}")));
        }
        Ok(())
    }

    pub fn from_center(center: Point2<f64>, w: f64, h: f64) -> Result<BoundingBox> {
        Self::new(center.x - 0.5 * w, center.y - 0.5 * h, w, h)
    }

    pub fn center(&self) -> Point2<f64> {
        Point2::new(self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    /// Tight box around the landmarks.
    pub fn tight(shape: &Shape2D) -> Result<BoundingBox> {
        let (lo, hi) = shape.extent();
        Self::new(lo.x, lo.y, hi.x - lo.x, hi.y - lo.y)
    }

    /// Grows both sides by `fraction` around the same center.
    pub fn dilated(&self, fraction: f64) -> Result<BoundingBox> {
        let f = 1.0 + fraction;
        Self::from_center(self.center(), self.w * f, self.h * f)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BoundingBox {
        BoundingBox {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }
}

/// `p -> scale * Rot(rotation) * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: f64,
    pub translation: Vector2<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: 0.0,
            translation: Vector2::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: f64, translation: Vector2<f64>) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!("similarity scale {scale} must be > 0")));
        }
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn apply_point(&self, p: &Point2<f64>) -> Point2<f64> {
        let r = Rotation2::new(self.rotation);
        Point2::from(self.scale * (r * p.coords) + self.translation)
    }

    pub fn inverse(&self) -> Self {
        let inv_rot = Rotation2::new(-self.rotation);
        let inv_scale = 1.0 / self.scale;
        Self {
            scale: inv_scale,
            rotation: -self.rotation,
            translation: -(inv_scale * (inv_rot * self.translation)),
        }
    }

    /// Transform equivalent to applying `self` first and then `next`.
    pub fn then(&self, next: &SimilarityTransform) -> Self {
        let r_next = Rotation2::new(next.rotation);
        Self {
            scale: self.scale * next.scale,
            rotation: self.rotation + next.rotation,
            translation: next.scale * (r_next * self.translation) + next.translation,
        }
    }
}

/// `R = Rz(roll) * Ry(yaw) * Rx(pitch)`.
pub fn euler_to_rotation(pose: &HeadPose) -> Matrix3<f64> {
    let (sa, ca) = pose.pitch.to_radians().sin_cos();
    let (sb, cb) = pose.yaw.to_radians().sin_cos();
    let (sg, cg) = pose.roll.to_radians().sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, ca, -sa, 0.0, sa, ca);
    let ry = Matrix3::new(cb, 0.0, sb, 0.0, 1.0, 0.0, -sb, 0.0, cb);
    let rz = Matrix3::new(cg, -sg, 0.0, sg, cg, 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

/// Result of decomposing a rotation into pitch/yaw/roll.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerDecomposition {
    pub pose: HeadPose,
    /// Set when yaw sits at +-90 degrees; roll is then fixed to zero.
    pub gimbal_lock: bool,
}

const ORTHONORMAL_TOL: f64 = 1e-6;
const GIMBAL_TOL_DEG: f64 = 1e-6;
const RANGE_SLACK_DEG: f64 = 1e-9;

pub fn rotation_to_euler(r: &Matrix3<f64>) -> Result<EulerDecomposition> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonOrthonormalInput);
    }
    let gram = r.transpose() * r - Matrix3::identity();
    if gram.amax() > ORTHONORMAL_TOL || r.determinant() <= 0.0 {
        return Err(Error::NonOrthonormalInput);
    }

    let yaw = (-r[(2, 0)]).clamp(-1.0, 1.0).asin().to_degrees();
    let gimbal_lock = 90.0 - yaw.abs() < GIMBAL_TOL_DEG;
    let (pitch, roll) = if gimbal_lock {
        // with roll fixed at zero the middle row is (0, cos pitch, -sin pitch)
        ((-r[(1, 2)]).atan2(r[(1, 1)]).to_degrees(), 0.0)
    } else {
        (
            r[(2, 1)].atan2(r[(2, 2)]).to_degrees(),
            r[(1, 0)].atan2(r[(0, 0)]).to_degrees(),
        )
    };

    let fit = |v: f64| {
        if v.abs() <= HeadPose::LIMIT_DEG + RANGE_SLACK_DEG {
            Ok(v.clamp(-HeadPose::LIMIT_DEG, HeadPose::LIMIT_DEG))
        } else {
            Err(Error::PoseOutOfRange)
        }
    };
    let pose = HeadPose {
        pitch: fit(pitch)?,
        yaw: yaw.clamp(-HeadPose::LIMIT_DEG, HeadPose::LIMIT_DEG),
        roll: fit(roll)?,
    };
    Ok(EulerDecomposition { pose, gimbal_lock })
}

/// Scaled orthographic projection of the 3D shape into `bb`.
///
/// The scale makes the frontal projection exactly `bb.w` wide and the
/// projected centroid lands on the box center.
pub fn project_weak_perspective(
    shape3d: &Shape3D,
    pose: &HeadPose,
    bb: &BoundingBox,
) -> Result<Shape2D> {
    pose.validate()?;
    bb.validate()?;
    let r = euler_to_rotation(pose);
    let scale = bb.w / shape3d.frontal_width();
    let c = bb.center();
    let points: Vec<Point2<f64>> = shape3d
        .points()
        .iter()
        .map(|p| {
            let q = r * p.coords;
            Point2::new(scale * q.x + c.x, scale * q.y + c.y)
        })
        .collect();
    let shape = Shape2D::new(points)?;
    let (lo, hi) = shape.extent();
    let extent = (hi.x - lo.x).max(hi.y - lo.y);
    if extent < 1e-9 * bb.w {
        return Err(Error::DegenerateProjection { extent });
    }
    Ok(shape)
}

/// Width-matched, rotation-free map from `src` onto `dst`.
pub fn similarity_between_boxes(src: &BoundingBox, dst: &BoundingBox) -> SimilarityTransform {
    let scale = dst.w / src.w;
    let translation = dst.center().coords - scale * src.center().coords;
    SimilarityTransform {
        scale,
        rotation: 0.0,
        translation,
    }
}

pub fn apply_similarity(t: &SimilarityTransform, shape: &Shape2D) -> Shape2D {
    Shape2D {
        points: shape.points.iter().map(|p| t.apply_point(p)).collect(),
    }
}
