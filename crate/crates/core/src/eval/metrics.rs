//! Position and rotation error metrics.

use nalgebra::Matrix3;

use super::EvalError;
use crate::rotation::{check_rotation, geodesic_angle, Mat3, Vec3};
use crate::skeleton::LOWER_BODY;

const M_TO_CM: f64 = 100.0;

/// Spread below which a point cloud counts as collapsed.
pub const MIN_SPREAD: f64 = 1e-12;

fn check_shapes(pred: &[Vec3], gt: &[Vec3]) -> Result<(), EvalError> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(EvalError::Shape(format!("{} predicted vs {} ground-truth joints", pred.len(), gt.len())));
    }
    Ok(())
}

/// Mean per-joint position error in centimeters.
pub fn mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64, EvalError> {
    check_shapes(pred, gt)?;
    Ok(mean_distance(pred, gt) * M_TO_CM)
}

/// MPJPE restricted to the joints in `subset`.
pub fn mpjpe_subset(pred: &[Vec3], gt: &[Vec3], subset: &[usize]) -> Result<f64, EvalError> {
    check_shapes(pred, gt)?;
    if subset.is_empty() || subset.iter().any(|&j| j >= pred.len()) {
        return Err(EvalError::Shape("joint subset out of range".into()));
    }
    let sum: f64 = subset.iter().map(|&j| (pred[j] - gt[j]).norm()).sum();
    Ok(sum / subset.len() as f64 * M_TO_CM)
}

fn mean_distance(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len() as f64
}

/// Similarity transform `y ≈ s·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Similarity {
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.scale * (self.rotation * x) + self.translation
    }
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().sum::<Vec3>() / points.len() as f64
}

/// Least-squares similarity aligning `source` onto `target` (Umeyama).
pub fn procrustes(source: &[Vec3], target: &[Vec3]) -> Result<Similarity, EvalError> {
    check_shapes(source, target)?;
    let n = source.len() as f64;
    let (mu_s, mu_t) = (centroid(source), centroid(target));
    let target_spread: f64 = target.iter().map(|y| (y - mu_t).norm_squared()).sum::<f64>() / n;
    if target_spread < MIN_SPREAD {
        return Err(EvalError::DegenerateCloud);
    }
    let source_spread: f64 = source.iter().map(|x| (x - mu_s).norm_squared()).sum::<f64>() / n;
    if source_spread < MIN_SPREAD {
        // Nothing to rotate or scale; the best fit collapses onto the target centroid.
        return Ok(Similarity { scale: 0.0, rotation: Mat3::identity(), translation: mu_t });
    }
    let mut cov = Matrix3::zeros();
    for (x, y) in source.iter().zip(target) {
        cov += (y - mu_t) * (x - mu_s).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut d = Vec3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        d.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&d) * v_t;
    let scale = svd.singular_values.dot(&d) / source_spread;
    let translation = mu_t - scale * (rotation * mu_s);
    Ok(Similarity { scale, rotation, translation })
}

/// MPJPE after similarity Procrustes alignment of `pred` to `gt`, in cm.
pub fn pa_mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64, EvalError> {
    let sim = procrustes(pred, gt)?;
    let aligned: Vec<Vec3> = pred.iter().map(|x| sim.apply(x)).collect();
    Ok(mean_distance(&aligned, gt) * M_TO_CM)
}

/// Mean per-joint geodesic rotation error in degrees.
pub fn mpjre(pred: &[Mat3], gt: &[Mat3]) -> Result<f64, EvalError> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(EvalError::Shape(format!("{} predicted vs {} ground-truth rotations", pred.len(), gt.len())));
    }
    let mut total = 0.0;
    for (joint, (a, b)) in pred.iter().zip(gt).enumerate() {
        check_rotation(a).map_err(|source| EvalError::NotARotation { joint, source })?;
        check_rotation(b).map_err(|source| EvalError::NotARotation { joint, source })?;
        total += geodesic_angle(a, b);
    }
    Ok(total / pred.len() as f64)
}

/// Default body split: the pelvis and legs are lower, everything above is upper.
pub fn default_lower_body() -> Vec<usize> {
    LOWER_BODY.to_vec()
}

pub fn default_upper_body(joints: usize) -> Vec<usize> {
    (0..joints).filter(|j| !LOWER_BODY.contains(j)).collect()
}
