//! Head pose from 2D landmarks by scaled-orthographic alignment with the
//! mean 3D face.

use nalgebra::{Matrix2x3, Matrix3, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_to_euler, HeadPose, Shape2D, Shape3D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseFit {
    pub pose: HeadPose,
    /// Model units to pixels.
    pub scale: f64,
    pub translation: Vector2<f64>,
    /// RMS reprojection error in pixels.
    pub residual: f64,
    pub gimbal_lock: bool,
}

/// Least-squares fit of `s * P * R * X + t` to the landmarks.
///
/// The unconstrained 2x3 map is solved through the normal equations, its
/// nearest orthonormal-row matrix comes from an SVD, and the third rotation
/// row is the cross product of the first two.
pub fn fit_pose_from_landmarks(landmarks: &Shape2D, shape3d: &Shape3D) -> Result<PoseFit> {
    if landmarks.len() != shape3d.len() {
        return Err(Error::mismatch(
            format!("{} landmarks", shape3d.len()),
            format!("{} landmarks", landmarks.len()),
        ));
    }
    let centroid = landmarks.centroid();
    let centered: Vec<Vector2<f64>> = landmarks.points().iter().map(|p| p - centroid).collect();

    let mut scatter2 = nalgebra::Matrix2::zeros();
    for y in &centered {
        scatter2 += y * y.transpose();
    }
    let eig = SymmetricEigen::new(scatter2).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if hi <= 0.0 || lo <= 1e-12 * hi {
        return Err(Error::DegenerateInput(
            "landmarks are collinear or coincident".into(),
        ));
    }

    let mut cross = Matrix2x3::zeros();
    let mut gram = Matrix3::zeros();
    for (y, x) in centered.iter().zip(shape3d.points()) {
        cross += y * x.coords.transpose();
        gram += x.coords * x.coords.transpose();
    }
    let gram_inv = gram
        .try_inverse()
        .ok_or_else(|| Error::DegenerateInput("3D shape is rank deficient".into()))?;
    let linear = cross * gram_inv;

    let svd = linear.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let rows: Matrix2x3<f64> = u * v_t;
    let r1: Vector3<f64> = rows.row(0).transpose();
    let r2: Vector3<f64> = rows.row(1).transpose();
    let r3 = r1.cross(&r2);
    let rotation = Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r3.transpose()]);

    let mut num = 0.0;
    let mut den = 0.0;
    for (y, x) in centered.iter().zip(shape3d.points()) {
        let q = rows * x.coords;
        num += y.dot(&q);
        den += q.norm_squared();
    }
    let scale = num / den;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::DegenerateInput(format!(
            "non-positive projection scale {scale}"
        )));
    }

    let sq: f64 = centered
        .iter()
        .zip(shape3d.points())
        .map(|(y, x)| (scale * (rows * x.coords) - y).norm_squared())
        .sum();
    let residual = (sq / centered.len() as f64).sqrt();

    let euler = rotation_to_euler(&rotation)?;
    Ok(PoseFit {
        pose: euler.pose,
        scale,
        translation: centroid.coords,
        residual,
        gimbal_lock: euler.gimbal_lock,
    })
}
