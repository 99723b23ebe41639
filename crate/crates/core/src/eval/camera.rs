//! Head-mounted pinhole camera and joint projection.

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::pose::DevicePose;
use crate::rotation::{Mat3, Vec3};

/// Pinhole camera rigidly attached to the headset.
///
/// `mount_rotation` columns are the camera axes expressed in the head frame
/// and `mount_translation` is the camera center in the head frame. Camera
/// axes follow the image convention: +x right, +y down, +z along the view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub mount_rotation: Mat3,
    pub mount_translation: Vec3,
}

impl Default for CameraModel {
    /// 320×256 downward-facing camera 5 cm below the head joint.
    fn default() -> Self {
        // Optical axis straight down, image right toward the wearer's right,
        // image up toward the front.
        let mount_rotation = Mat3::from_columns(&[
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(0.0, 0.0, -1.0),
            Vec3::new(0.0, -1.0, 0.0),
        ]);
        Self {
            fx: 200.0,
            fy: 200.0,
            cx: 160.0,
            cy: 128.0,
            width: 320,
            height: 256,
            mount_rotation,
            mount_translation: Vec3::new(0.0, -0.05, 0.0),
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(EvalError::InvalidCamera("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(EvalError::InvalidCamera("resolution must be positive"));
        }
        crate::rotation::check_rotation(&self.mount_rotation)
            .map_err(|_| EvalError::InvalidCamera("mount rotation is not a rotation"))?;
        Ok(())
    }

    /// World point to camera coordinates given the headset pose.
    pub fn world_to_camera(&self, point: &Vec3, head_position: &Vec3, head_rotation: &Mat3) -> Vec3 {
        let in_head = head_rotation.transpose() * (point - head_position);
        self.mount_rotation.transpose() * (in_head - self.mount_translation)
    }

    pub fn project(&self, camera_point: &Vec3) -> Projection {
        let z = camera_point.z;
        let u = self.fx * camera_point.x / z + self.cx;
        let v = self.fy * camera_point.y / z + self.cy;
        let inside = u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64;
        Projection { u, v, depth: z, visible: z > 0.0 && inside }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Meters along the optical axis; negative behind the camera.
    pub depth: f64,
    pub visible: bool,
}

pub fn project_joints(positions: &[Vec3], head: &DevicePose, cam: &CameraModel) -> Result<Vec<Projection>, EvalError> {
    cam.validate()?;
    let r = head.rotation().map_err(|source| EvalError::NotARotation { joint: crate::skeleton::HEAD, source })?;
    Ok(positions.iter().map(|p| cam.project(&cam.world_to_camera(p, &head.position, &r))).collect())
}
