use serde::{Deserialize, Serialize};

use crate::rotation::{relative_transform, Mat3, Rot6D, RotationError, Vec3};

pub const JOINT_COUNT: usize = 22;
pub const LOCAL_ROTATION_COUNT: usize = JOINT_COUNT - 1;

/// One tracked device (headset or controller) at one timestamp.
///
/// `angular_velocity` is the time derivative of the 6D orientation, taken
/// componentwise, so it lives in the same six-dimensional space as the
/// orientation itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevicePose {
    pub timestamp: f64,
    pub position: Vec3,
    pub orientation: Rot6D,
    pub linear_velocity: Vec3,
    pub angular_velocity: [f64; 6],
}

impl DevicePose {
    pub fn at_rest(timestamp: f64, position: Vec3, orientation: Rot6D) -> Self {
        Self {
            timestamp,
            position,
            orientation,
            linear_velocity: Vec3::zeros(),
            angular_velocity: [0.0; 6],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.timestamp.is_finite()
            && self.position.iter().all(|v| v.is_finite())
            && self.orientation.is_finite()
            && self.linear_velocity.iter().all(|v| v.is_finite())
            && self.angular_velocity.iter().all(|v| v.is_finite())
    }

    pub fn rotation(&self) -> Result<Mat3, RotationError> {
        self.orientation.to_matrix()
    }
}

/// Position and orientation of `target` in the coordinate frame of `anchor`.
pub fn relative_pose(anchor: &DevicePose, target: &DevicePose) -> Result<(Vec3, Rot6D), RotationError> {
    let ra = anchor.rotation()?;
    let rt = target.rotation()?;
    let (p, r) = relative_transform(&anchor.position, &ra, &target.position, &rt);
    Ok((p, Rot6D::from_matrix_unchecked(&r)))
}

/// Root global rotation plus 21 parent-relative rotations, with world joint
/// positions once forward kinematics has run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullBodyPose {
    pub root_rotation: Rot6D,
    pub local_rotations: [Rot6D; LOCAL_ROTATION_COUNT],
    pub positions: Option<Vec<Vec3>>,
}

impl FullBodyPose {
    pub fn identity() -> Self {
        Self {
            root_rotation: Rot6D::IDENTITY,
            local_rotations: [Rot6D::IDENTITY; LOCAL_ROTATION_COUNT],
            positions: None,
        }
    }

    /// Rotation of joint `i`: the root's global rotation for `i == 0`,
    /// otherwise the rotation relative to the parent.
    pub fn rotation(&self, joint: usize) -> &Rot6D {
        if joint == 0 {
            &self.root_rotation
        } else {
            &self.local_rotations[joint - 1]
        }
    }

    pub fn rotations(&self) -> impl Iterator<Item = &Rot6D> {
        std::iter::once(&self.root_rotation).chain(self.local_rotations.iter())
    }

    pub fn rotation_matrices(&self) -> Result<Vec<Mat3>, RotationError> {
        self.rotations().map(Rot6D::to_matrix).collect()
    }

    pub fn from_rotations(rotations: &[Rot6D]) -> Option<Self> {
        if rotations.len() != JOINT_COUNT {
            return None;
        }
        let mut local = [Rot6D::IDENTITY; LOCAL_ROTATION_COUNT];
        local.copy_from_slice(&rotations[1..]);
        Some(Self { root_rotation: rotations[0], local_rotations: local, positions: None })
    }

    /// Same pose with every rotation replaced by its orthonormal form.
    pub fn orthonormalized(&self) -> Result<Self, RotationError> {
        let mut local = self.local_rotations;
        for r in local.iter_mut() {
            *r = r.orthonormalized()?;
        }
        Ok(Self {
            root_rotation: self.root_rotation.orthonormalized()?,
            local_rotations: local,
            positions: self.positions.clone(),
        })
    }
}
