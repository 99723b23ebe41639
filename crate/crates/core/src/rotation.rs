//! Continuous 6D rotation representation and the small amount of SO(3)
//! algebra the rest of the engine needs.
//!
//! A [`Rot6D`] stores the first two columns of a rotation matrix,
//! `[c0.x, c0.y, c0.z, c1.x, c1.y, c1.z]`. Decoding runs Gram-Schmidt on the
//! two stored columns and completes the frame with a cross product, so any
//! finite, non-degenerate six-vector maps to a proper rotation.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Norm below which a 6D column is treated as zero.
pub const DEGENERATE_EPS: f64 = 1e-8;
/// Tolerance of the orthonormality check on incoming matrices.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RotationError {
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(&'static str),
    #[error("matrix is not a rotation (max deviation {deviation:.3e}, det {det:.6})")]
    NotARotation { deviation: f64, det: f64 },
    #[error("non-finite rotation component")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rot6D(pub [f64; 6]);

impl Rot6D {
    pub const IDENTITY: Rot6D = Rot6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn as_array(&self) -> &[f64; 6] {
        &self.0
    }

    pub fn first_column(&self) -> Vec3 {
        Vec3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn second_column(&self) -> Vec3 {
        Vec3::new(self.0[3], self.0[4], self.0[5])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn to_matrix(&self) -> Result<Mat3, RotationError> {
        rot6d_to_matrix(self)
    }

    pub fn from_matrix(m: &Mat3) -> Result<Self, RotationError> {
        matrix_to_rot6d(m)
    }

    /// Takes the stored columns of `m` without any validation.
    pub fn from_matrix_unchecked(m: &Mat3) -> Self {
        Rot6D([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]])
    }

    /// Decodes and re-encodes, yielding the canonical orthonormal 6D value.
    pub fn orthonormalized(&self) -> Result<Self, RotationError> {
        Ok(Self::from_matrix_unchecked(&rot6d_to_matrix(self)?))
    }
}

impl Default for Rot6D {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Gram-Schmidt completion of a 6D rotation.
pub fn rot6d_to_matrix(r: &Rot6D) -> Result<Mat3, RotationError> {
    if !r.is_finite() {
        return Err(RotationError::NonFinite);
    }
    let a = r.first_column();
    let b = r.second_column();
    let a_norm = a.norm();
    if a_norm <= DEGENERATE_EPS {
        return Err(RotationError::DegenerateRotation("first column is near zero"));
    }
    let x = a / a_norm;
    let b_orth = b - x * x.dot(&b);
    let b_norm = b_orth.norm();
    if b_norm <= DEGENERATE_EPS * b.norm().max(1.0) {
        return Err(RotationError::DegenerateRotation("columns are parallel"));
    }
    let y = b_orth / b_norm;
    let z = x.cross(&y);
    Ok(Mat3::from_columns(&[x, y, z]))
}

/// Largest entry of `|RᵀR − I|`.
pub fn orthonormality_deviation(m: &Mat3) -> f64 {
    (m.transpose() * m - Mat3::identity()).abs().max()
}

pub fn check_rotation(m: &Mat3) -> Result<(), RotationError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(RotationError::NonFinite);
    }
    let deviation = orthonormality_deviation(m);
    let det = m.determinant();
    if deviation > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL * 3.0 {
        return Err(RotationError::NotARotation { deviation, det });
    }
    Ok(())
}

pub fn matrix_to_rot6d(m: &Mat3) -> Result<Rot6D, RotationError> {
    check_rotation(m)?;
    Ok(Rot6D::from_matrix_unchecked(m))
}

/// Pose of `target` expressed in the frame of `anchor`: `(Rᵃᵀ(pᵗ − pᵃ), RᵃᵀRᵗ)`.
pub fn relative_transform(
    anchor_position: &Vec3,
    anchor_rotation: &Mat3,
    target_position: &Vec3,
    target_rotation: &Mat3,
) -> (Vec3, Mat3) {
    let inv = anchor_rotation.transpose();
    (inv * (target_position - anchor_position), inv * target_rotation)
}

/// Geodesic distance between two rotations in degrees, in `[0, 180]`.
///
/// Evaluated as `atan2(|axis part|, cos part)` of `RaᵀRb`, which equals
/// `acos(clamp((tr − 1)/2))` but keeps full precision near 0 and 180 degrees.
pub fn geodesic_angle(ra: &Mat3, rb: &Mat3) -> f64 {
    let d = ra.transpose() * rb;
    let cos = ((d.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let axis = Vec3::new(d[(2, 1)] - d[(1, 2)], d[(0, 2)] - d[(2, 0)], d[(1, 0)] - d[(0, 1)]);
    let sin = (axis.norm() * 0.5).clamp(0.0, 1.0);
    sin.atan2(cos).to_degrees().clamp(0.0, 180.0)
}

/// Rotation about a unit axis by `angle` radians (Rodrigues).
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).into_inner()
}

pub fn rot_x(angle: f64) -> Mat3 {
    axis_angle(&Vec3::x(), angle)
}

pub fn rot_y(angle: f64) -> Mat3 {
    axis_angle(&Vec3::y(), angle)
}

pub fn rot_z(angle: f64) -> Mat3 {
    axis_angle(&Vec3::z(), angle)
}

/// Rotation about +y that best matches the heading of `m` (its forward axis
/// projected onto the ground plane). Falls back to identity when the forward
/// axis is vertical.
pub fn yaw_of(m: &Mat3) -> Mat3 {
    let forward = m.column(2);
    let (x, z) = (forward[0], forward[2]);
    if x.hypot(z) < 1e-9 {
        return Mat3::identity();
    }
    rot_y(x.atan2(z))
}
